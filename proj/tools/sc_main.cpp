/* Copyright 2026 The sparse-contrast Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// sc: data generation, pretraining, fine-tuning, evaluation, benchmarks,
// gradient checks and attention inspection.
//
// Exit codes: 0 success, 1 I/O or other failure, 2 usage, 3 config,
// 4 file format, 5 shape, 6 training, 7 numeric domain, 8 check failed.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sc/bench.hpp"
#include "sc/config.hpp"
#include "sc/gradcheck_suite.hpp"
#include "sc/persist.hpp"
#include "sc/synthdata.hpp"
#include "sc/training.hpp"

namespace {

using namespace sc;
namespace fs = std::filesystem;

constexpr int kExitIo = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitFormat = 4;
constexpr int kExitShape = 5;
constexpr int kExitTraining = 6;
constexpr int kExitDomain = 7;
constexpr int kExitCheck = 8;

RunConfig load_config(const fs::path& path) {
  RunConfig c = parse_config(io::read_text(path));
  apply_seed_env(c, std::getenv("SC_SEED"));
  return c;
}

void check_geometry(const Dataset& ds, const RunConfig& c) {
  if (ds.H != c.image_h || ds.W != c.image_w || ds.C != c.channels || ds.P != c.P) {
    throw ShapeError("dataset", std::to_string(ds.H) + "x" + std::to_string(ds.W) + "x" +
                                    std::to_string(ds.C) + " images with P=" +
                                    std::to_string(ds.P) + " do not match the config");
  }
}

// Checkpoint weights must fit the architecture the config describes.
ModelParams<float> params_for(const Checkpoint& ck, const RunConfig& c) {
  ModelParams<float> p = ck.params;
  p.arch = c.arch();
  p.validate();
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  return fs::path(p.string() + suffix);
}

// ------------------------------------------------------------- gen-data

int gen_data(const fs::path& spec_path, const fs::path& out) {
  const SynthSpec spec = parse_synth_spec(io::read_text(spec_path));
  const Dataset ds = make_dataset(spec);
  save_dataset(ds, out);
  std::size_t pos = 0;
  for (const auto& s : ds.samples) pos += s.label;
  std::cout << "wrote " << ds.size() << " images (" << pos << " anomalous) "
            << ds.H << "x" << ds.W << "x" << ds.C << " P=" << ds.P << " to " << out.string()
            << "\n";
  return 0;
}

// ------------------------------------------------------------- pretrain

template <class T>
int pretrain_as(const RunConfig& c, const Dataset& ds, const fs::path& out) {
  std::ostringstream csv;
  csv << std::setprecision(9) << "step,L_contrast,L_sparse_soft,L_sparse_hard,L_total\n";
  auto on_step = [&](const StepMetrics& m) {
    csv << m.step << ',' << m.l_contrast << ',' << m.l_sparse_soft << ',' << m.l_sparse_hard
        << ',' << m.l_total << '\n';
    if (c.log_every && ((m.step + 1) % c.log_every == 0 || m.step + 1 == c.steps)) {
      std::cout << "step " << m.step + 1 << "/" << c.steps << " L_contrast " << m.l_contrast
                << " L_sparse " << m.l_sparse_soft << " L_total " << m.l_total << std::endl;
    }
  };
  PretrainResult<T> r = pretrain<T>(ds, c, on_step);
  const AttnCache cache = snapshot_cache<T>(ds, r.params, c);

  Checkpoint ck;
  ck.config = c;
  ck.params = r.params.template cast<float>();
  OptimizerState<float> opt;
  opt.config = r.opt.config;
  opt.updates = r.opt.updates;
  for (const auto& [name, s] : r.opt.slots) {
    auto& d = opt.slots[name];
    d.step = s.step;
    d.m.assign(s.m.begin(), s.m.end());
    d.v.assign(s.v.begin(), s.v.end());
  }
  ck.optimizer = std::move(opt);
  save_checkpoint(ck, out);
  save_cache(cache, with_suffix(out, ".cache"));
  write_text(with_suffix(out, ".metrics.csv"), csv.str());
  std::cout << "checkpoint " << out.string() << "\nattention cache "
            << with_suffix(out, ".cache").string() << " (" << cache.entries.size()
            << " images, K=" << cache.K << ")\n";
  std::size_t with_mask = 0;
  for (const auto& s : ds.samples) with_mask += s.anomaly_mask.empty() ? 0 : 1;
  if (with_mask > 0 && c.attention == AttentionMode::kSparse) {
    std::cout << "localization recall " << localization_recall(ds, cache) << "\n";
  }
  return 0;
}

int run_pretrain(const fs::path& cfg, const fs::path& data, const fs::path& out) {
  const RunConfig c = load_config(cfg);
  const Dataset ds = load_dataset(data);
  check_geometry(ds, c);
  return c.precision == Precision::kDouble ? pretrain_as<double>(c, ds, out)
                                           : pretrain_as<float>(c, ds, out);
}

// ------------------------------------------------------------- finetune

std::optional<AttnCache> maybe_cache(const std::string& path, const Dataset& ds) {
  if (path.empty()) return std::nullopt;
  AttnCache cache = load_cache(path);
  if (cache.L != ds.L()) {
    throw ShapeError("attention cache", "L=" + std::to_string(cache.L) + " but the dataset has L=" +
                                            std::to_string(ds.L()));
  }
  return cache;
}

template <class T>
int finetune_as(const RunConfig& c, const Dataset& ds, const Checkpoint& ck,
                const AttnCache* cache, const fs::path& out) {
  std::ostringstream csv;
  csv << std::setprecision(9) << "step,loss,batch_accuracy\n";
  auto on_step = [&](const FinetuneMetrics& m) {
    csv << m.step << ',' << m.loss << ',' << m.batch_accuracy << '\n';
    if (c.log_every && ((m.step + 1) % c.log_every == 0 || m.step + 1 == c.finetune_steps)) {
      std::cout << "step " << m.step + 1 << "/" << c.finetune_steps << " loss " << m.loss
                << " batch_accuracy " << m.batch_accuracy << std::endl;
    }
  };
  auto r = finetune<T>(ds, params_for(ck, c).template cast<T>(), c, cache, on_step);
  Checkpoint outck;
  outck.config = c;
  outck.params = r.params.template cast<float>();
  save_checkpoint(outck, out);
  write_text(with_suffix(out, ".metrics.csv"), csv.str());
  std::cout << "checkpoint " << out.string() << "\n";
  return 0;
}

int run_finetune(const fs::path& cfg, const fs::path& data, const fs::path& ckpt,
                 const std::string& cache_path, const fs::path& out) {
  const RunConfig c = load_config(cfg);
  const Dataset ds = load_dataset(data);
  check_geometry(ds, c);
  const Checkpoint ck = load_checkpoint(ckpt);
  const auto cache = maybe_cache(cache_path, ds);
  const AttnCache* cp = cache ? &*cache : nullptr;
  return c.precision == Precision::kDouble ? finetune_as<double>(c, ds, ck, cp, out)
                                           : finetune_as<float>(c, ds, ck, cp, out);
}

// ----------------------------------------------------------------- eval

template <class T>
EvalMetrics eval_as(const RunConfig& c, const Dataset& ds, const Checkpoint& ck,
                    const AttnCache* cache) {
  ModelParams<T> p = params_for(ck, c).template cast<T>();
  const auto ids = heldout_indices(ds, c.labeled);
  return evaluate<T>(ds, ids, p, c, cache);
}

int run_eval(const fs::path& cfg, const fs::path& data, const fs::path& ckpt,
             const std::string& cache_path) {
  const RunConfig c = load_config(cfg);
  const Dataset ds = load_dataset(data);
  check_geometry(ds, c);
  const Checkpoint ck = load_checkpoint(ckpt);
  const auto cache = maybe_cache(cache_path, ds);
  const AttnCache* cp = cache ? &*cache : nullptr;
  const EvalMetrics m = c.precision == Precision::kDouble ? eval_as<double>(c, ds, ck, cp)
                                                          : eval_as<float>(c, ds, ck, cp);
  std::cout << "n " << m.n << "\naccuracy " << m.accuracy << "\nauc " << m.auc << "\n";
  return 0;
}

// ---------------------------------------------------------------- bench

struct SweepPoint {
  std::size_t L = 0, K = 0, d = 0;
};

SweepPoint parse_point(const std::string& s) {
  SweepPoint p;
  char c1 = 0, c2 = 0;
  std::istringstream in(s);
  if (!(in >> p.L >> c1 >> p.K >> c2 >> p.d) || c1 != ',' || c2 != ',' || !in.eof()) {
    throw ConfigError("--sweep expects L,K,d, got '" + s + "'");
  }
  if (p.L == 0 || p.K == 0 || p.K > p.L || p.d == 0) {
    throw ConfigError("--sweep needs 1 <= K <= L and d >= 1, got '" + s + "'");
  }
  return p;
}

int run_bench(const fs::path& cfg, const std::vector<std::string>& sweep, std::size_t trials,
              const std::string& csv_path) {
  const RunConfig c = load_config(cfg);
  std::vector<SweepPoint> points;
  for (const auto& s : sweep) points.push_back(parse_point(s));
  if (points.empty()) {
    for (std::size_t L : {c.L(), std::size_t{256}, std::size_t{1024}}) {
      points.push_back({L, topk_count(c.rho, L), c.d});
    }
  }
  BenchReport rep;
  for (const auto& p : points) rep.rows.push_back(bench_row(p.L, p.K, p.d, trials, c.seed));
  std::cout << rep.table();

  // Whole-forward model at the configured architecture, per image.
  const CostModel dense = flop_count(c, AttentionMode::kDense);
  const CostModel sparse = flop_count(c, AttentionMode::kSparse);
  std::cout << "\nforward per image at L=" << c.L() << " K=" << c.K() << "\n"
            << "  dense  flops " << dense.total() << " (attention " << dense.attention() << ")\n"
            << "  sparse flops " << sparse.total() << " (attention " << sparse.attention()
            << ", saliency " << sparse.saliency << ", selection ~"
            << static_cast<std::uint64_t>(sparse.selection_comparisons) << " comparisons)\n";
  bool counts_ok = true;
  for (auto mode : {AttentionMode::kDense, AttentionMode::kSparse}) {
    const CountReport r = count_check(instrumented_forward<float>(c, mode, c.seed),
                                      flop_count(c, mode));
    for (const auto& row : r.mismatches()) {
      std::cerr << "count mismatch (" << to_string(mode) << ") " << row.what << ": model "
                << row.expected << ", measured " << row.measured << "\n";
    }
    counts_ok = counts_ok && r.passed();
  }
  std::cout << "runtime counters " << (counts_ok ? "match" : "DIFFER FROM") << " the model\n";
  if (!csv_path.empty()) write_text(csv_path, rep.csv());
  return counts_ok ? 0 : kExitCheck;
}

// ------------------------------------------------------------ gradcheck

int run_gradcheck(const std::string& module) {
  const SuiteResult r = run_gradcheck_suite(parse_suite_module(module));
  for (const auto& rep : r.reports) {
    std::size_t checked = 0, skipped = 0, floor = 0;
    for (const auto& e : rep.entries) {
      checked += e.checked;
      skipped += e.skipped;
      floor += e.at_noise_floor;
    }
    std::cout << (rep.passed() ? "PASS " : "FAIL ") << std::left << std::setw(44) << rep.label
              << " max_rel_err " << std::scientific << std::setprecision(3)
              << rep.max_rel_error() << std::defaultfloat << " tol " << rep.tol << " checked "
              << checked << " skipped " << skipped << " noise_floor " << floor << "\n";
    if (!rep.passed()) {
      for (const auto& e : rep.entries) {
        if (e.max_rel_error > rep.tol || !e.finite) {
          std::cout << "    " << e.name << "[" << e.worst_index << "] analytic "
                    << e.worst_analytic << " fd " << e.worst_fd << " at " << e.location << "\n";
        }
      }
    }
  }
  std::cout << (r.passed() ? "all passed" : "FAILED") << ", max rel error " << r.max_rel_error()
            << "\n";
  return r.passed() ? 0 : kExitCheck;
}

// -------------------------------------------------------------- inspect

// Saliency heatmap on the patch grid, scaled so the largest score is 255.
std::string pgm(const std::vector<double>& s_hat, std::size_t gh, std::size_t gw) {
  const double mx = *std::max_element(s_hat.begin(), s_hat.end());
  std::ostringstream os;
  os << "P2\n" << gw << " " << gh << "\n255\n";
  for (std::size_t y = 0; y < gh; ++y) {
    for (std::size_t x = 0; x < gw; ++x) {
      const double v = mx > 0 ? s_hat[y * gw + x] / mx : 0.0;
      os << (x ? " " : "") << static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    }
    os << "\n";
  }
  return os.str();
}

int run_inspect(const fs::path& ckpt, const fs::path& data, std::size_t image,
                const std::string& prefix, bool row_sums) {
  Checkpoint ck = load_checkpoint(ckpt);
  RunConfig c = ck.config;
  const Dataset ds = load_dataset(data);
  check_geometry(ds, c);
  if (image >= ds.size()) {
    throw ShapeError("inspect", "image " + std::to_string(image) + " outside a dataset of " +
                                    std::to_string(ds.size()));
  }
  ModelParams<double> p = ck.params.cast<double>();
  const std::size_t L = ds.L();
  const std::vector<std::size_t> ids{image};
  const Tensor<double> sh = saliency_of<double>(ds, ids, p, c);
  const std::vector<double> s_hat(sh.data().begin(), sh.data().end());
  const std::vector<std::size_t> S = select_topk<double>(s_hat, c.rho).indices;

  const std::size_t gh = ds.H / ds.P, gw = ds.W / ds.P;
  write_text(prefix + ".pgm", pgm(s_hat, gh, gw));
  {
    std::ostringstream os;
    os << "# image " << image << " label " << int(ds.samples[image].label) << " L " << L << " K "
       << S.size() << "\n";
    for (std::size_t i = 0; i < S.size(); ++i) os << (i ? " " : "") << S[i];
    os << "\n";
    write_text(prefix + ".support.txt", os.str());
  }
  {
    std::ostringstream os;
    os << std::setprecision(9);
    for (std::size_t y = 0; y < gh; ++y) {
      for (std::size_t x = 0; x < gw; ++x) os << (x ? " " : "") << s_hat[y * gw + x];
      os << "\n";
    }
    write_text(prefix + ".s_hat.txt", os.str());
  }
  if (row_sums) {
    // The observer sees Q, K, V per block; the map is rebuilt with the full
    // L x L matrix materialised and its rows summed.
    std::ostringstream os;
    os << std::setprecision(17) << "block,row,sum\n";
    auto opts = EncodeOptions<double>::from(c);
    opts.observer = [&](std::size_t blk, std::size_t, const Tensor<double>& Q,
                        const Tensor<double>& K, const Tensor<double>& V) {
      const AttentionResult<double> r =
          c.attention == AttentionMode::kDense
              ? dense_attention(Q, K, V)
              : sparse_attention<double>(Q, K, V, S, s_hat, c.bias_mode, true);
      const Tensor<double> A = r.A.full ? *r.A.full : r.A.materialize();
      for (std::size_t i = 0; i < L; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < L; ++j) sum += A(i, j);
        os << blk << ',' << i << ',' << sum << '\n';
      }
    };
    std::vector<const Image*> ptrs{&ds.samples[image].image};
    Graph<double> g;
    encode(g.constant(stack_patches<double>(ptrs, ds.P)), 1, p, opts);
    write_text(prefix + ".rowsums.csv", os.str());
  }
  std::cout << "wrote " << prefix << ".pgm (" << gw << "x" << gh << "), " << prefix
            << ".support.txt, " << prefix << ".s_hat.txt"
            << (row_sums ? ", " + prefix + ".rowsums.csv" : std::string()) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  sc::configure_allocator();
  CLI::App app{"sparse-contrast: saliency-driven sparse attention with contrastive pretraining"};
  app.require_subcommand(1);

  std::string spec, out, config, data, ckpt, cache, module = "all", prefix, csv;
  std::vector<std::string> sweep;
  std::size_t image = 0, trials = 30;
  bool row_sums = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--spec", spec, "dataset spec (key = value)")->required();
  gen->add_option("--out", out, "output dataset file")->required();

  auto* pre = app.add_subcommand("pretrain", "Contrastive pretraining");
  pre->add_option("--config", config)->required();
  pre->add_option("--data", data)->required();
  pre->add_option("--out", out, "checkpoint; .metrics.csv and .cache are written beside it")
      ->required();

  auto* ft = app.add_subcommand("finetune", "Supervised fine-tuning on the labeled images");
  ft->add_option("--config", config)->required();
  ft->add_option("--data", data)->required();
  ft->add_option("--ckpt", ckpt)->required();
  ft->add_option("--cache", cache, "attention cache from pretraining");
  ft->add_option("--out", out)->required();

  auto* ev = app.add_subcommand("eval", "Held-out accuracy and AUC");
  ev->add_option("--config", config)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--cache", cache);

  auto* be = app.add_subcommand("bench", "Operation counts and attention timings");
  be->add_option("--config", config)->required();
  be->add_option("--sweep", sweep, "one or more L,K,d points");
  be->add_option("--trials", trials, "timing trials per point (0 skips timing)");
  be->add_option("--csv", csv, "also write the report as CSV");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--module", module)->check(CLI::IsMember({"all", "diffcore", "model", "losses"}));

  auto* in = app.add_subcommand("inspect", "Dump saliency, support and attention row sums");
  in->add_option("--ckpt", ckpt)->required();
  in->add_option("--data", data)->required();
  in->add_option("--image", image)->required();
  in->add_option("--out", prefix, "output prefix")->required();
  in->add_flag("--row-sums", row_sums, "also write materialised attention row sums");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  // Library errors already name their kind ("config error at line 3: ...").
  auto fail = [](const std::exception& e, int code) {
    std::cerr << "sc: " << e.what() << "\n";
    return code;
  };
  try {
    if (*gen) return gen_data(spec, out);
    if (*pre) return run_pretrain(config, data, out);
    if (*ft) return run_finetune(config, data, ckpt, cache, out);
    if (*ev) return run_eval(config, data, ckpt, cache);
    if (*be) return run_bench(config, sweep, trials, csv);
    if (*gc) return run_gradcheck(module);
    if (*in) return run_inspect(ckpt, data, image, prefix, row_sums);
  } catch (const sc::ConfigError& e) {
    return fail(e, kExitConfig);
  } catch (const sc::FormatError& e) {
    return fail(e, kExitFormat);
  } catch (const sc::ShapeError& e) {
    return fail(e, kExitShape);
  } catch (const sc::TrainingError& e) {
    std::cerr << "sc: training error: " << e.what() << "\n";
    return kExitTraining;
  } catch (const sc::DomainError& e) {
    return fail(e, kExitDomain);
  } catch (const std::exception& e) {
    std::cerr << "sc: error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
