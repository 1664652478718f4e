#pragma once

// Benchmark and ablation harness: fans independent (cell, seed) runs across
// worker threads (capped by CDFSOD_THREADS), shares base models across
// methods and sweep points, and renders CSV, text tables and SVG charts.
// Every run is a pure function of its config, so results are independent of
// scheduling order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdfsod/trainer.hpp"

namespace cdfsod {

inline int thread_budget() {
  if (const char* env = std::getenv("CDFSOD_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? int(hc) : 1;
}

inline void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(thread_budget(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::mutex err_mu;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      while (!failed.load()) {
        int i = next.fetch_add(1);
        if (i >= n) break;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          failed.store(true);
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// Base models depend only on (seed, base_iters, base_images, gamma); one
// trained copy serves every method and sweep point that shares those.
class BaseModelCache {
 public:
  std::string key(const TrainConfig& cfg) const {
    std::ostringstream k;
    k << cfg.seed << ":" << cfg.base_iters << ":" << cfg.base_images << ":"
      << std::hexfloat << cfg.gamma;
    return k.str();
  }

  // Trains all missing keys, in parallel across distinct seeds.
  void warm(const std::vector<TrainConfig>& configs, const std::vector<DomainSpec>& domains) {
    std::vector<TrainConfig> missing;
    {
      std::lock_guard<std::mutex> lk(mu_);
      std::vector<std::string> seen;
      for (const TrainConfig& c : configs) {
        std::string k = key(c);
        if (models_.count(k) || std::count(seen.begin(), seen.end(), k)) continue;
        seen.push_back(k);
        missing.push_back(c);
      }
    }
    if (missing.empty()) return;
    const DomainSpec& base = find_domain(domains, "base");
    std::vector<ModelWeights> trained(missing.size());
    parallel_for(int(missing.size()), [&](int i) {
      const TrainConfig& c = missing[size_t(i)];
      auto base_set = generate_dataset(base, c.base_images, "train",
                                       Rng::derive(c.seed, "base_data"));
      trained[size_t(i)] = base_train(base_set, int(base.class_defs.size()), c.base_iters,
                                      c.gamma, Rng::derive(c.seed, "base"));
    });
    std::lock_guard<std::mutex> lk(mu_);
    for (size_t i = 0; i < missing.size(); ++i)
      models_.emplace(key(missing[i]), std::move(trained[i]));
  }

  const ModelWeights* get(const TrainConfig& cfg) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = models_.find(key(cfg));
    return it == models_.end() ? nullptr : &it->second;
  }

 private:
  std::mutex mu_;
  std::map<std::string, ModelWeights> models_;
};

// ---- benchmark over {method x domain x shots x seed} ----

struct BenchRow {
  std::string method;
  std::string domain;
  int shots = 0;
  uint64_t seed = 0;
  std::string role;  // student | teacher
  MetricsRecord rec;
};

struct BenchmarkRequest {
  TrainConfig cfg;  // template; cfg.seed is the first seed
  bool lambda_explicit = false;  // false: lambda follows the per-shot default
  std::vector<Method> methods{Method::naive_ft, Method::ema_only, Method::distill_only,
                              Method::full};
  std::vector<std::string> domains{"target_finegrained", "target_lowcontrast",
                                   "target_topdown"};
  std::vector<int> shots{1, 5, 10};
  int n_seeds = 5;
};

struct BenchmarkResult {
  BenchmarkRequest request;
  std::vector<BenchRow> rows;  // 2 rows (student, teacher) per cell
};

inline TrainConfig cell_config(const BenchmarkRequest& req, Method m, const std::string& domain,
                               int shots, int seed_idx) {
  TrainConfig c = req.cfg;
  c.domain = domain;
  c.k = shots;
  if (!req.lambda_explicit) c.lambda = default_lambda(shots);
  c.seed = req.cfg.seed + uint64_t(seed_idx);
  return method_config(c, m);
}

inline BenchmarkResult run_benchmark(const BenchmarkRequest& req,
                                     const std::vector<DomainSpec>& domains,
                                     BaseModelCache& cache) {
  if (req.methods.empty() || req.domains.empty() || req.shots.empty() || req.n_seeds < 1)
    throw std::invalid_argument("run_benchmark: empty request");
  struct Cell {
    Method method;
    std::string domain;
    int shots;
    int seed_idx;
  };
  std::vector<Cell> cells;
  std::vector<TrainConfig> cell_cfgs;
  for (Method m : req.methods)
    for (const std::string& d : req.domains)
      for (int s : req.shots)
        for (int i = 0; i < req.n_seeds; ++i) {
          cells.push_back(Cell{m, d, s, i});
          cell_cfgs.push_back(cell_config(req, m, d, s, i));
        }
  cache.warm(cell_cfgs, domains);

  BenchmarkResult result;
  result.request = req;
  result.rows.resize(cells.size() * 2);
  parallel_for(int(cells.size()), [&](int i) {
    const Cell& cell = cells[size_t(i)];
    const TrainConfig& cfg = cell_cfgs[size_t(i)];
    RunEnv env = prepare_env(cfg, domains, cache.get(cfg));
    RunArtifacts art = train_full(cfg, env, /*with_snapshots=*/false);
    BenchRow row;
    row.method = method_name(cell.method);
    row.domain = cell.domain;
    row.shots = cell.shots;
    row.seed = cfg.seed;
    row.role = "student";
    row.rec = evaluate(art.student, env.target_test);
    result.rows[size_t(i) * 2] = row;
    row.role = "teacher";
    row.rec = evaluate(art.teacher, env.target_test);
    result.rows[size_t(i) * 2 + 1] = std::move(row);
  });
  return result;
}

// ---- ablation sweeps ----

struct SweepRow {
  double value = 0;
  int shots = 0;
  uint64_t seed = 0;
  std::string role;
  MetricsRecord rec;
};

struct SweepRequest {
  TrainConfig cfg;
  std::string param;  // alpha | delta | lambda
  std::vector<double> grid;
  std::vector<int> shots{1, 5, 10};
  int n_seeds = 3;
};

struct SweepResult {
  SweepRequest request;
  std::vector<SweepRow> rows;
};

inline std::vector<double> default_grid(const std::string& param) {
  if (param == "alpha") return {0.5, 0.9, 0.99, 0.999, 0.9999};
  if (param == "delta") return {0.6, 0.7, 0.8, 0.9};
  if (param == "lambda") return {1, 2, 3, 4, 5, 6, 7};
  throw std::invalid_argument("unknown sweep parameter '" + param +
                              "' (known: alpha, delta, lambda)");
}

inline TrainConfig apply_sweep_value(TrainConfig cfg, const std::string& param, double v) {
  if (param == "alpha")
    cfg.alpha = v;
  else if (param == "delta")
    cfg.delta = v;
  else if (param == "lambda")
    cfg.lambda = v;
  else
    throw std::invalid_argument("unknown sweep parameter '" + param + "'");
  return cfg;
}

inline SweepResult ablation_sweep(const SweepRequest& req, const std::vector<DomainSpec>& domains,
                                  BaseModelCache& cache) {
  if (req.grid.size() < 3)
    throw std::invalid_argument("ablation_sweep: grid needs at least 3 values");
  if (req.shots.empty() || req.n_seeds < 1)
    throw std::invalid_argument("ablation_sweep: empty request");
  struct Point {
    double value;
    int shots;
    int seed_idx;
  };
  std::vector<Point> points;
  std::vector<TrainConfig> cfgs;
  for (double v : req.grid)
    for (int s : req.shots)
      for (int i = 0; i < req.n_seeds; ++i) {
        TrainConfig c = req.cfg;
        c.k = s;
        if (req.param != "lambda") c.lambda = default_lambda(s);
        c.seed = req.cfg.seed + uint64_t(i);
        c = apply_sweep_value(method_config(c, Method::full), req.param, v);
        points.push_back(Point{v, s, i});
        cfgs.push_back(c);
      }
  cache.warm(cfgs, domains);

  SweepResult result;
  result.request = req;
  result.rows.resize(points.size() * 2);
  parallel_for(int(points.size()), [&](int i) {
    const TrainConfig& cfg = cfgs[size_t(i)];
    RunEnv env = prepare_env(cfg, domains, cache.get(cfg));
    RunArtifacts art = train_full(cfg, env, /*with_snapshots=*/false);
    SweepRow row;
    row.value = points[size_t(i)].value;
    row.shots = points[size_t(i)].shots;
    row.seed = cfg.seed;
    row.role = "student";
    row.rec = evaluate(art.student, env.target_test);
    result.rows[size_t(i) * 2] = row;
    row.role = "teacher";
    row.rec = evaluate(art.teacher, env.target_test);
    result.rows[size_t(i) * 2 + 1] = std::move(row);
  });
  return result;
}

// ---- aggregation and formatting ----

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0, 0};
  double m = 0;
  for (double x : xs) m += x;
  m /= double(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / double(xs.size()))};
}

inline std::string fmt_double(double v, int prec = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string per_class_json(const MetricsRecord& rec, const DomainSpec& dom) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [cid, ap] : rec.per_class)
    j[dom.class_defs.at(size_t(cid)).name] = ap;
  return j.dump();
}

inline std::string metrics_csv_header() {
  return "method,domain,shots,seed,role,mAP,AP50,per_class_json\n";
}

inline std::string metrics_csv_row(const std::string& method, const std::string& domain,
                                   int shots, uint64_t seed, const std::string& role,
                                   const MetricsRecord& rec, const DomainSpec& dom) {
  return method + "," + domain + "," + std::to_string(shots) + "," + std::to_string(seed) + "," +
         role + "," + fmt_double(rec.map) + "," + fmt_double(rec.ap50) + "," +
         csv_escape(per_class_json(rec, dom)) + "\n";
}

inline std::string benchmark_csv(const BenchmarkResult& result,
                                 const std::vector<DomainSpec>& domains) {
  std::string out = metrics_csv_header();
  for (const BenchRow& r : result.rows)
    out += metrics_csv_row(r.method, r.domain, r.shots, r.seed, r.role, r.rec,
                           find_domain(domains, r.domain));
  return out;
}

inline std::string sweep_csv(const SweepResult& result, const std::vector<DomainSpec>& domains) {
  std::string out = "param,value,method,domain,shots,seed,role,mAP,AP50,per_class_json\n";
  const DomainSpec& dom = find_domain(domains, result.request.cfg.domain);
  for (const SweepRow& r : result.rows) {
    out += result.request.param + "," + fmt_double(r.value, 4) + ",full," +
           result.request.cfg.domain + "," + std::to_string(r.shots) + "," +
           std::to_string(r.seed) + "," + r.role + "," + fmt_double(r.rec.map) + "," +
           fmt_double(r.rec.ap50) + "," + csv_escape(per_class_json(r.rec, dom)) + "\n";
  }
  return out;
}

// Mean mAP over seeds for one (method, domain, shots, role) cell.
inline std::map<std::string, std::vector<double>> collect_cells(const BenchmarkResult& result) {
  std::map<std::string, std::vector<double>> cells;
  for (const BenchRow& r : result.rows)
    cells[r.method + "|" + r.domain + "|" + std::to_string(r.shots) + "|" + r.role].push_back(
        r.rec.map);
  return cells;
}

inline std::string benchmark_table(const BenchmarkResult& result) {
  auto cells = collect_cells(result);
  std::ostringstream out;
  out << "mAP@[.5:.95], mean +/- std over " << result.request.n_seeds << " seed(s)\n";
  for (const std::string& domain : result.request.domains) {
    out << "\ndomain: " << domain << "\n";
    out << std::left << std::setw(14) << "method" << std::setw(9) << "role";
    for (int s : result.request.shots) out << std::setw(17) << (std::to_string(s) + "-shot");
    out << "\n";
    for (Method m : result.request.methods)
      for (const char* role : {"student", "teacher"}) {
        out << std::left << std::setw(14) << method_name(m) << std::setw(9) << role;
        for (int s : result.request.shots) {
          auto key = std::string(method_name(m)) + "|" + domain + "|" + std::to_string(s) + "|" +
                     role;
          auto it = cells.find(key);
          if (it == cells.end()) {
            out << std::setw(17) << "-";
          } else {
            auto [mean, sd] = mean_std(it->second);
            out << std::setw(17) << (fmt_double(mean, 4) + "+/-" + fmt_double(sd, 4));
          }
        }
        out << "\n";
      }
  }
  return out.str();
}

// Headline ordering checks at one (domain, shots) cell: mean teacher mAP of
// the full method beats ema_only and distill_only, exceeds naive fine-tune
// by at least naive_margin, and teacher >= student in at least 80% of seeds.
// Returns human-readable failure descriptions, empty when all hold.
inline std::vector<std::string> check_ordering(const BenchmarkResult& result,
                                               const std::string& domain, int shots,
                                               double naive_margin = 0.02) {
  auto cells = collect_cells(result);
  auto cell_mean = [&](const std::string& method, const char* role) {
    auto it = cells.find(method + "|" + domain + "|" + std::to_string(shots) + "|" + role);
    return it == cells.end() ? std::nan("") : mean_std(it->second).first;
  };
  std::string at = domain + " " + std::to_string(shots) + "-shot";
  std::vector<std::string> fails;
  double full = cell_mean("full", "teacher");
  double ema = cell_mean("ema_only", "teacher");
  double dis = cell_mean("distill_only", "teacher");
  double naive = cell_mean("naive_ft", "teacher");
  if (std::isnan(full) || std::isnan(ema) || std::isnan(dis) || std::isnan(naive)) {
    fails.push_back("ordering check at " + at +
                    " needs all of naive_ft, ema_only, distill_only, full");
    return fails;
  }
  if (!(full > ema))
    fails.push_back("full teacher mAP " + fmt_double(full, 4) + " not above ema_only " +
                    fmt_double(ema, 4) + " at " + at);
  if (!(full > dis))
    fails.push_back("full teacher mAP " + fmt_double(full, 4) + " not above distill_only " +
                    fmt_double(dis, 4) + " at " + at);
  if (!(full >= naive + naive_margin))
    fails.push_back("full teacher mAP " + fmt_double(full, 4) + " not >= naive_ft " +
                    fmt_double(naive, 4) + " + " + fmt_double(naive_margin, 3) + " at " + at);

  std::map<uint64_t, std::pair<double, double>> by_seed;  // student, teacher
  for (const BenchRow& r : result.rows) {
    if (r.method != "full" || r.domain != domain || r.shots != shots) continue;
    if (r.role == "student") by_seed[r.seed].first = r.rec.map;
    else by_seed[r.seed].second = r.rec.map;
  }
  int n = int(by_seed.size()), ok = 0;
  for (const auto& [seed, pair] : by_seed) ok += pair.second >= pair.first;
  int need = (4 * n + 4) / 5;  // ceil(0.8 n)
  if (n > 0 && ok < need)
    fails.push_back("teacher >= student in only " + std::to_string(ok) + "/" +
                    std::to_string(n) + " seeds (need " + std::to_string(need) + ") at " + at);
  return fails;
}

// ---- SVG line charts (categorical x axis) ----

struct ChartSeries {
  std::string label;
  std::vector<double> y;  // one value per x label, NaN = missing
};

inline std::string line_chart_svg(const std::string& title,
                                  const std::vector<std::string>& x_labels,
                                  const std::string& y_label,
                                  const std::vector<ChartSeries>& series) {
  const int w = 640, h = 420, x0 = 70, x1 = 610, y0 = 370, y1 = 50;
  double ymax = 0.05;
  for (const ChartSeries& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) ymax = std::max(ymax, v);
  ymax *= 1.1;
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  auto px = [&](int i) {
    int n = std::max(1, int(x_labels.size()) - 1);
    return x_labels.size() == 1 ? (x0 + x1) / 2.0 : x0 + (x1 - x0) * double(i) / n;
  };
  auto py = [&](double v) { return y0 - (y0 - y1) * (v / ymax); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  s << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"26\" text-anchor=\"middle\" font-size=\"15\" "
       "font-family=\"sans-serif\">" << title << "</text>\n";
  s << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
    << "\" stroke=\"black\"/>\n";
  for (int g = 0; g <= 4; ++g) {
    double v = ymax * g / 4;
    s << "<text x=\"" << x0 - 8 << "\" y=\"" << fmt_double(py(v) + 4, 1)
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">"
      << fmt_double(v, 3) << "</text>\n";
  }
  for (size_t i = 0; i < x_labels.size(); ++i)
    s << "<text x=\"" << fmt_double(px(int(i)), 1) << "\" y=\"" << y0 + 18
      << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << x_labels[i]
      << "</text>\n";
  s << "<text x=\"20\" y=\"" << (y0 + y1) / 2
    << "\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 20 "
    << (y0 + y1) / 2 << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (size_t k = 0; k < series.size(); ++k) {
    const char* color = colors[k % 6];
    std::string pts;
    for (size_t i = 0; i < series[k].y.size() && i < x_labels.size(); ++i) {
      if (!std::isfinite(series[k].y[i])) continue;
      pts += fmt_double(px(int(i)), 1) + "," + fmt_double(py(series[k].y[i]), 1) + " ";
    }
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts
      << "\"/>\n";
    s << "<text x=\"" << x1 - 90 << "\" y=\"" << y1 + 16 * int(k)
      << "\" font-size=\"12\" font-family=\"sans-serif\" fill=\"" << color << "\">"
      << series[k].label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// One chart per domain: teacher mAP vs shots, one polyline per method.
inline std::map<std::string, std::string> benchmark_charts(const BenchmarkResult& result) {
  auto cells = collect_cells(result);
  std::map<std::string, std::string> charts;
  std::vector<std::string> x_labels;
  for (int s : result.request.shots) x_labels.push_back(std::to_string(s));
  for (const std::string& domain : result.request.domains) {
    std::vector<ChartSeries> series;
    for (Method m : result.request.methods) {
      ChartSeries cs;
      cs.label = method_name(m);
      for (int s : result.request.shots) {
        auto it = cells.find(std::string(method_name(m)) + "|" + domain + "|" +
                             std::to_string(s) + "|teacher");
        cs.y.push_back(it == cells.end() ? std::nan("") : mean_std(it->second).first);
      }
      series.push_back(std::move(cs));
    }
    charts["benchmark_" + domain + ".svg"] =
        line_chart_svg("teacher mAP on " + domain + " vs shots", x_labels, "mAP", series);
  }
  return charts;
}

// One chart per sweep: teacher mAP vs parameter value, one polyline per shot
// count.
inline std::string sweep_chart(const SweepResult& result) {
  std::map<std::string, std::vector<double>> cells;
  for (const SweepRow& r : result.rows)
    if (r.role == "teacher")
      cells[fmt_double(r.value, 4) + "|" + std::to_string(r.shots)].push_back(r.rec.map);
  std::vector<std::string> x_labels;
  for (double v : result.request.grid) {
    std::ostringstream s;
    s << v;
    x_labels.push_back(s.str());
  }
  std::vector<ChartSeries> series;
  for (int s : result.request.shots) {
    ChartSeries cs;
    cs.label = std::to_string(s) + "-shot";
    for (double v : result.request.grid) {
      auto it = cells.find(fmt_double(v, 4) + "|" + std::to_string(s));
      cs.y.push_back(it == cells.end() ? std::nan("") : mean_std(it->second).first);
    }
    series.push_back(std::move(cs));
  }
  return line_chart_svg("teacher mAP vs " + result.request.param + " (" +
                            result.request.cfg.domain + ")",
                        x_labels, "mAP", series);
}

// ---- file output ----

inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + tmp.string());
    f << content;
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace cdfsod
