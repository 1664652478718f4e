// Command-line entry point: gen-data, train, benchmark, ablate.
// All outputs land under --out with a fixed layout (manifest.json,
// metrics.csv, table.txt, charts/*.svg, checkpoints/*.bin, renders/*.ppm).
// CDFSOD_THREADS caps worker parallelism.

#include <ctime>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cdfsod/checkpoint.hpp"
#include "cdfsod/config.hpp"
#include "cdfsod/dataset_io.hpp"
#include "cdfsod/harness.hpp"
#include "cdfsod/version.hpp"

namespace fs = std::filesystem;
using namespace cdfsod;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  for (const std::string& p : split_list(s)) out.push_back(std::stoi(p));
  return out;
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  for (const std::string& p : split_list(s)) out.push_back(std::stod(p));
  return out;
}

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

nlohmann::json manifest_head(const std::string& command) {
  nlohmann::json j;
  j["command"] = command;
  j["version"] = kVersionString;
  j["code_hash"] = version_hash();
  j["created"] = now_iso8601();  // informational; reproducibility covers metrics
  return j;
}

ParsedConfig load_config(const std::string& path) {
  if (path.empty()) {
    ParsedConfig pc;
    pc.cfg.lambda = default_lambda(pc.cfg.k);
    return pc;
  }
  return config_from_json(nlohmann::json::parse(read_file(path)));
}

std::string method_from_flags(const TrainConfig& c) {
  if (c.ema_enabled && c.distill_enabled) return "full";
  if (c.ema_enabled) return "ema_only";
  if (c.distill_enabled) return "distill_only";
  return "naive_ft";
}

void save_weights_atomic(const fs::path& path, const ModelWeights& w) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  save_weights(tmp.string(), w);
  fs::rename(tmp, path);
}

void write_renders(const fs::path& dir, const ModelWeights& model,
                   const std::vector<LabeledImage>& test, int count) {
  fs::create_directories(dir);
  for (int i = 0; i < count && i < int(test.size()); ++i) {
    Image img = test[size_t(i)].image;
    for (const Box& b : test[size_t(i)].boxes) draw_box_outline(img, b, {0.1, 0.9, 0.1});
    for (const Detection& d : nms(decode(forward(model, test[size_t(i)].image), 0.25), 0.5))
      draw_box_outline(img, d.box, {0.95, 0.1, 0.1});
    char name[32];
    std::snprintf(name, sizeof name, "test_%04d.ppm", i);
    write_ppm((dir / name).string(), img);
  }
}

int cmd_gen_data(const std::string& domain, int n_train, int n_test, uint64_t seed,
                 const std::string& out_dir) {
  auto domains = builtin_domains();
  const DomainSpec& spec = find_domain(domains, domain);
  export_dataset(out_dir, "train", generate_dataset(spec, n_train, "train", seed), spec);
  export_dataset(out_dir, "test", generate_dataset(spec, n_test, "test", seed), spec);
  std::cout << "wrote " << n_train << " train + " << n_test << " test images for '" << domain
            << "' to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  ParsedConfig pc = load_config(config_path);
  const TrainConfig& cfg = pc.cfg;
  auto domains = builtin_domains();
  RunEnv env = prepare_env(cfg, domains);
  RunArtifacts art = train_full(cfg, env, /*with_snapshots=*/true);

  fs::path out(out_dir);
  fs::create_directories(out);
  nlohmann::json man = manifest_head("train");
  man["config"] = config_to_json(cfg);
  man["lambda_explicit"] = pc.lambda_explicit;
  man["domains"] = {env.base_domain.name, env.target_domain.name};
  man["outputs"] = {{"metrics", "metrics.csv"},
                    {"loss_log", "loss_log.json"},
                    {"checkpoints", "checkpoints/"},
                    {"renders", "renders/"}};
  atomic_write(out / "manifest.json", man.dump(2) + "\n");

  nlohmann::json log = nlohmann::json::array();
  for (size_t i = 0; i < art.log.size(); ++i) {
    const LossBreakdown& lb = art.log[i];
    log.push_back({{"iter", i},
                   {"total", lb.total},
                   {"l_s", lb.l_s},
                   {"l_d", lb.l_d},
                   {"l_s_cls", lb.l_s_cls},
                   {"l_s_loc", lb.l_s_loc},
                   {"l_d_cls", lb.l_d_cls},
                   {"l_d_loc", lb.l_d_loc},
                   {"n_pseudo", lb.n_pseudo}});
  }
  atomic_write(out / "loss_log.json", log.dump() + "\n");

  std::string method = method_from_flags(cfg);
  std::string csv = metrics_csv_header();
  csv += metrics_csv_row(method, cfg.domain, cfg.k, cfg.seed, "student",
                         evaluate(art.student, env.target_test), env.target_domain);
  csv += metrics_csv_row(method, cfg.domain, cfg.k, cfg.seed, "teacher",
                         evaluate(art.teacher, env.target_test), env.target_domain);
  atomic_write(out / "metrics.csv", csv);

  save_weights_atomic(out / "checkpoints" / "student.bin", art.student);
  save_weights_atomic(out / "checkpoints" / "teacher.bin", art.teacher);
  write_renders(out / "renders", art.teacher, env.target_test, 4);

  std::cout << "method " << method << " on " << cfg.domain << ", K=" << cfg.k << "\n";
  for (const EvalSnapshot& s : art.snapshots)
    std::cout << "iter " << s.iter << ": student mAP " << fmt_double(s.student.map, 4)
              << ", teacher mAP " << fmt_double(s.teacher.map, 4) << "\n";
  return 0;
}

int run_benchmark_request(const BenchmarkRequest& req, const fs::path& out,
                          bool assert_ordering) {
  auto domains = builtin_domains();
  BaseModelCache cache;
  BenchmarkResult result = run_benchmark(req, domains, cache);

  nlohmann::json man = manifest_head("benchmark");
  man["config"] = config_to_json(req.cfg);
  man["lambda_explicit"] = req.lambda_explicit;
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : req.methods) methods.push_back(method_name(m));
  man["methods"] = methods;
  man["domains"] = req.domains;
  man["shots"] = req.shots;
  man["n_seeds"] = req.n_seeds;
  man["outputs"] = {{"metrics", "metrics.csv"}, {"table", "table.txt"}, {"charts", "charts/"}};
  fs::create_directories(out);
  atomic_write(out / "manifest.json", man.dump(2) + "\n");
  atomic_write(out / "metrics.csv", benchmark_csv(result, domains));
  std::string table = benchmark_table(result);
  atomic_write(out / "table.txt", table);
  for (const auto& [name, svg] : benchmark_charts(result))
    atomic_write(out / "charts" / name, svg);
  std::cout << table;

  if (assert_ordering) {
    int top_shot = *std::max_element(req.shots.begin(), req.shots.end());
    std::vector<std::string> fails;
    for (const std::string& d : req.domains) {
      auto f = check_ordering(result, d, top_shot);
      fails.insert(fails.end(), f.begin(), f.end());
    }
    if (!fails.empty()) {
      for (const std::string& f : fails) std::cerr << "ordering failure: " << f << "\n";
      return 1;
    }
    std::cout << "ordering assertions passed\n";
  }
  return 0;
}

BenchmarkRequest request_from_manifest(const nlohmann::json& man) {
  if (man.at("command").get<std::string>() != "benchmark")
    throw std::invalid_argument("manifest: not a benchmark manifest");
  BenchmarkRequest req;
  ParsedConfig pc = config_from_json(man.at("config"));
  req.cfg = pc.cfg;
  req.lambda_explicit = man.at("lambda_explicit").get<bool>();
  req.methods.clear();
  for (const auto& m : man.at("methods")) req.methods.push_back(parse_method(m.get<std::string>()));
  req.domains = man.at("domains").get<std::vector<std::string>>();
  req.shots = man.at("shots").get<std::vector<int>>();
  req.n_seeds = man.at("n_seeds").get<int>();
  return req;
}

int cmd_ablate(const std::string& param, const std::string& grid_str, const std::string& shots_str,
               int seeds, const std::string& config_path, const std::string& out_dir) {
  ParsedConfig pc = load_config(config_path);
  SweepRequest req;
  req.cfg = pc.cfg;
  req.param = param;
  req.grid = grid_str.empty() ? default_grid(param) : split_doubles(grid_str);
  req.shots = split_ints(shots_str);
  req.n_seeds = seeds;

  auto domains = builtin_domains();
  BaseModelCache cache;
  SweepResult result = ablation_sweep(req, domains, cache);

  fs::path out(out_dir);
  nlohmann::json man = manifest_head("ablate");
  man["config"] = config_to_json(req.cfg);
  man["lambda_explicit"] = pc.lambda_explicit;
  man["param"] = req.param;
  man["grid"] = req.grid;
  man["shots"] = req.shots;
  man["n_seeds"] = req.n_seeds;
  man["outputs"] = {{"metrics", "metrics.csv"}, {"charts", "charts/"}};
  fs::create_directories(out);
  atomic_write(out / "manifest.json", man.dump(2) + "\n");
  atomic_write(out / "metrics.csv", sweep_csv(result, domains));
  atomic_write(out / "charts" / ("sweep_" + param + ".svg"), sweep_chart(result));

  std::cout << "sweep over " << param << " done; teacher mAP means:\n";
  for (double v : req.grid) {
    std::cout << "  " << param << "=" << v << ":";
    for (int s : req.shots) {
      std::vector<double> vals;
      for (const SweepRow& r : result.rows)
        if (r.role == "teacher" && r.shots == s && r.value == v) vals.push_back(r.rec.map);
      std::cout << " " << s << "-shot " << fmt_double(mean_std(vals).first, 4);
    }
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-domain few-shot detection: synthetic benchmark and distillation trainer"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset (PPM + JSON)");
  std::string gen_domain = "base", gen_out;
  int gen_train = 100, gen_test = 50;
  uint64_t gen_seed = 1;
  gen->add_option("--domain", gen_domain, "domain name (see builtin list)");
  gen->add_option("--n-train", gen_train, "training images")->check(CLI::PositiveNumber);
  gen->add_option("--n-test", gen_test, "test images")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "master seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "run the full training pipeline once");
  std::string train_config, train_out;
  train->add_option("--config", train_config, "JSON config (all fields optional)");
  train->add_option("--out", train_out, "output directory")->required();

  auto* bench = app.add_subcommand("benchmark", "method x domain x shots x seed table");
  std::string b_methods = "naive_ft,ema_only,distill_only,full";
  std::string b_domains = "target_finegrained,target_lowcontrast,target_topdown";
  std::string b_shots = "1,5,10", b_config, b_out, b_manifest;
  int b_seeds = 5;
  bool b_assert = false;
  bench->add_option("--methods", b_methods, "comma list");
  bench->add_option("--domains", b_domains, "comma list");
  bench->add_option("--shots", b_shots, "comma list");
  bench->add_option("--seeds", b_seeds, "seed count")->check(CLI::PositiveNumber);
  bench->add_option("--config", b_config, "JSON config for the base hyperparameters");
  bench->add_option("--manifest", b_manifest, "re-run an existing benchmark manifest");
  bench->add_option("--out", b_out, "output directory")->required();
  bench->add_flag("--assert-ordering", b_assert, "fail unless the headline ordering holds");

  auto* ablate = app.add_subcommand("ablate", "hyperparameter sweep (alpha | delta | lambda)");
  std::string a_param, a_grid, a_shots = "1,5,10", a_config, a_out;
  int a_seeds = 3;
  ablate->add_option("--param", a_param, "alpha | delta | lambda")->required();
  ablate->add_option("--grid", a_grid, "comma list of values (default per param)");
  ablate->add_option("--shots", a_shots, "comma list");
  ablate->add_option("--seeds", a_seeds, "seed count")->check(CLI::PositiveNumber);
  ablate->add_option("--config", a_config, "JSON config");
  ablate->add_option("--out", a_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_domain, gen_train, gen_test, gen_seed, gen_out);
    if (train->parsed()) return cmd_train(train_config, train_out);
    if (bench->parsed()) {
      BenchmarkRequest req;
      if (!b_manifest.empty()) {
        req = request_from_manifest(nlohmann::json::parse(read_file(b_manifest)));
      } else {
        ParsedConfig pc = load_config(b_config);
        req.cfg = pc.cfg;
        req.lambda_explicit = pc.lambda_explicit;
        req.methods.clear();
        for (const std::string& m : split_list(b_methods)) req.methods.push_back(parse_method(m));
        req.domains = split_list(b_domains);
        req.shots = split_ints(b_shots);
        req.n_seeds = b_seeds;
      }
      return run_benchmark_request(req, b_out, b_assert);
    }
    if (ablate->parsed())
      return cmd_ablate(a_param, a_grid, a_shots, a_seeds, a_config, a_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
