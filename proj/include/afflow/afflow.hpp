#pragma once

#include "afflow/cocycle.hpp"
#include "afflow/correction.hpp"
#include "afflow/doubled.hpp"
#include "afflow/error.hpp"
#include "afflow/flow.hpp"
#include "afflow/harness.hpp"
#include "afflow/json_io.hpp"
#include "afflow/matrix.hpp"
#include "afflow/rng.hpp"
#include "afflow/subalgebra.hpp"
#include "afflow/tower.hpp"
