// Command-line driver: instance generation, tower/block fixes, verification,
// and eta sweeps over the correction pipelines.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

#include "afflow/afflow.hpp"

namespace {

using namespace afflow;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("cannot open " + path);
  json j;
  in >> j;
  return j;
}

void write_json_file(const std::string& path, const json& j) {
  if (path == "-" || path.empty()) {
    std::cout << j.dump(2) << std::endl;
    return;
  }
  std::ofstream out(path);
  out << j.dump(2) << std::endl;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

int worker_count() {
  if (const char* env = std::getenv("AFFLOW_WORKERS")) {
    const int w = std::atoi(env);
    if (w > 0) return w;
  }
  return 1;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"afflow: cocycle corrections for matrix-algebra flows"};
  app.require_subcommand(1);
  FixConfig cfg;

  // gen
  auto* gen = app.add_subcommand("gen", "generate a seeded instance");
  int g_n = 8;
  std::string g_tower = "2,2";
  double g_eta = 1e-3;
  std::uint64_t g_seed = 1;
  int g_pw = 0;
  std::string g_out = "-";
  gen->add_option("--n", g_n, "ambient dimension");
  gen->add_option("--tower", g_tower, "relative block sizes, e.g. 2,2,2");
  gen->add_option("--eta", g_eta, "perturbation strength");
  gen->add_option("--seed", g_seed, "instance seed");
  gen->add_option("--pointwise-level", g_pw,
                  "omit generator parts inside this level (0 = none)");
  gen->add_option("-o,--output", g_out, "output file (- for stdout)");

  // fix-tower
  auto* ft = app.add_subcommand("fix-tower", "restore tower invariance");
  std::string ft_in, ft_out = "-";
  ft->add_option("input", ft_in, "instance json")->required();
  ft->add_option("-o,--output", ft_out, "report file");

  // fix-prop-a
  auto* fp = app.add_subcommand("fix-prop-a",
                                "restore invariance of one tower level");
  std::string fp_in, fp_out = "-";
  int fp_block = 1;
  fp->add_option("input", fp_in, "instance json")->required();
  fp->add_option("--block", fp_block, "tower level (1-based)");
  fp->add_option("-o,--output", fp_out, "report file");

  // fix-pointwise
  auto* fw = app.add_subcommand("fix-pointwise",
                                "make the flow the identity on one level");
  std::string fw_in, fw_out = "-";
  int fw_level = 1;
  fw->add_option("input", fw_in, "instance json")->required();
  fw->add_option("--level", fw_level, "tower level (1-based)");
  fw->add_option("-o,--output", fw_out, "report file");

  // verify
  auto* vf = app.add_subcommand("verify", "re-verify a report");
  std::string vf_in, vf_out = "-";
  int vf_grid = 129;
  vf->add_option("input", vf_in, "report json")->required();
  vf->add_option("--grid", vf_grid, "refined grid points");
  vf->add_option("-o,--output", vf_out, "output file");

  // sweep
  auto* sw = app.add_subcommand("sweep", "eta sweep with matched seeds");
  std::string sw_etas = "1e-1,1e-2,1e-3,1e-4";
  int sw_n = 8;
  std::string sw_tower = "2,2";
  std::uint64_t sw_seed = 1;
  std::string sw_csv = "-";
  sw->add_option("--etas", sw_etas, "comma-separated eta values");
  sw->add_option("--n", sw_n, "ambient dimension");
  sw->add_option("--tower", sw_tower, "relative block sizes");
  sw->add_option("--seed", sw_seed, "matched seed");
  sw->add_option("--csv", sw_csv, "csv output (- for stdout)");

  for (auto* sub : {ft, fp, fw, vf, sw, gen}) {
    sub->add_option("--grid-points", cfg.grid_points, "defect grid size");
    sub->add_option("--trials", cfg.trials, "sampling trials");
    sub->add_option("--admissible-delta", cfg.admissible_delta,
                    "defect hypothesis gate");
    sub->add_option("--exact-tol", cfg.exact_tol, "exactness gate");
    sub->add_option("--kernel-scale", cfg.kernel_scale,
                    "fixed kernel dilation (0 = adaptive)");
    sub->add_option("--eps-budget", cfg.eps_budget, "tower correction budget");
    sub->add_option("--config-seed", cfg.seed, "sampling seed");
  }

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    const Instance inst =
        gen_instance(g_n, parse_int_list(g_tower), g_eta, g_seed, g_pw);
    write_json_file(g_out, inst.to_json());
    return 0;
  }
  if (ft->parsed()) {
    const Instance inst = Instance::from_json(read_json_file(ft_in));
    const RunReport rep = run_instance(inst, cfg, "tower");
    write_json_file(ft_out, rep.to_json());
    return rep.pass ? 0 : 3;
  }
  if (fp->parsed()) {
    const Instance inst = Instance::from_json(read_json_file(fp_in));
    const RunReport rep = run_instance(inst, cfg, "prop-a", fp_block);
    write_json_file(fp_out, rep.to_json());
    return rep.pass ? 0 : 3;
  }
  if (fw->parsed()) {
    const Instance inst = Instance::from_json(read_json_file(fw_in));
    const RunReport rep = run_instance(inst, cfg, "pointwise", fw_level);
    write_json_file(fw_out, rep.to_json());
    return rep.pass ? 0 : 3;
  }
  if (vf->parsed()) {
    const RunReport rep = verify_report(read_json_file(vf_in), vf_grid, cfg);
    write_json_file(vf_out, rep.to_json());
    return rep.pass ? 0 : 3;
  }
  if (sw->parsed()) {
    const auto etas = parse_double_list(sw_etas);
    const auto tower = parse_int_list(sw_tower);
    const int workers = worker_count();
    std::vector<std::future<RunReport>> futs;
    std::vector<RunReport> reports(etas.size());
    for (std::size_t i = 0; i < etas.size(); i += workers) {
      futs.clear();
      for (std::size_t j = i; j < std::min(etas.size(), i + workers); ++j)
        futs.push_back(std::async(std::launch::async, [&, j] {
          const Instance inst = gen_instance(sw_n, tower, etas[j], sw_seed);
          return run_instance(inst, cfg, "tower");
        }));
      for (std::size_t j = 0; j < futs.size(); ++j)
        reports[i + j] = futs[j].get();
    }
    std::ostringstream os;
    write_csv_header(os);
    for (std::size_t j = 0; j < etas.size(); ++j)
      write_csv_rows(os, etas[j], reports[j]);
    if (sw_csv == "-" || sw_csv.empty()) {
      std::cout << os.str();
    } else {
      std::ofstream f(sw_csv);
      f << os.str();
    }
    bool all = true;
    for (const auto& r : reports) all = all && r.pass;
    return all ? 0 : 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const afflow::PreconditionError& e) {
    const afflow::json out{{"pass", false},
                           {"error", e.what()},
                           {"stage", e.stage},
                           {"kind", "precondition"}};
    std::cerr << out.dump(2) << std::endl;
    return 2;
  } catch (const afflow::InternalError& e) {
    const afflow::json out{{"pass", false},
                           {"error", e.what()},
                           {"stage", e.stage},
                           {"kind", "internal"}};
    std::cerr << out.dump(2) << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
}
