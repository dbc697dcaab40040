#include <catch_amalgamated.hpp>
TEST_CASE("placeholder test_cocycle") { REQUIRE(true); }
