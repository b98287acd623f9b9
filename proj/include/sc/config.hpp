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

#ifndef SC_CONFIG_HPP_
#define SC_CONFIG_HPP_

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sc/diffcore/adamw.hpp"
#include "sc/error.hpp"
#include "sc/io/keyvalue.hpp"
#include "sc/model/params.hpp"
#include "sc/sparse_attn.hpp"

namespace sc {

enum class AttentionMode { kSparse, kDense };
// kStatic freezes each image's support to its selection before the first
// update (the "fixed sparse pattern" ablation).
enum class SupportSchedule { kDynamic, kStatic };
enum class Precision { kSingle, kDouble };

inline std::string_view to_string(AttentionMode m) { return m == AttentionMode::kSparse ? "sparse" : "dense"; }
inline std::string_view to_string(SupportSchedule s) { return s == SupportSchedule::kDynamic ? "dynamic" : "static"; }
inline std::string_view to_string(Precision p) { return p == Precision::kSingle ? "single" : "double"; }

// Every hyperparameter and format knob of a run.
struct RunConfig {
  // image / architecture
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t channels = 1;
  std::size_t P = 8;
  std::size_t d = 64;
  std::size_t n_blocks = 2;
  std::size_t mlp_hidden = 128;
  std::vector<std::size_t> saliency_hidden{512, 256};
  std::size_t proj_hidden = 64;
  std::size_t d_z = 32;
  std::size_t n_classes = 2;
  SaliencyInput saliency_input = SaliencyInput::kEmbedded;

  // sparse attention and losses
  double rho = 0.3;
  double tau = 0.1;
  double lambda = 0.5;
  std::optional<double> theta;  // unset => 1/L
  double t_ind = 0.05;
  BiasMode bias_mode = BiasMode::kSaliency;
  AttentionMode attention = AttentionMode::kSparse;
  SupportSchedule support_schedule = SupportSchedule::kDynamic;

  // optimisation; the reference full-scale batch is 256, 32 suits one CPU core
  std::size_t alt_period = 1;
  std::size_t batch = 32;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 2000;
  std::size_t finetune_steps = 100;
  std::size_t finetune_batch = 32;
  double finetune_lr = 1e-3;
  bool reuse_cache = true;
  std::size_t labeled = 64;  // leading dataset images used for fine-tuning
  Precision precision = Precision::kSingle;
  std::uint64_t seed = 0;
  bool seed_set = false;  // seed given explicitly in the text

  // augmentation
  double flip_prob = 0.5;
  double noise_std = 0.05;
  double jitter = 0.1;
  double crop_min = 0.75;
  double crop_max = 1.0;

  // output
  std::size_t log_every = 100;

  Architecture arch() const {
    Architecture a;
    a.H = image_h;
    a.W = image_w;
    a.C = channels;
    a.P = P;
    a.d = d;
    a.n_blocks = n_blocks;
    a.mlp_hidden = mlp_hidden;
    a.saliency_hidden = saliency_hidden;
    a.proj_hidden = proj_hidden;
    a.d_z = d_z;
    a.n_classes = n_classes;
    a.saliency_input = saliency_input;
    return a;
  }

  std::size_t L() const { return (image_h / P) * (image_w / P); }
  std::size_t K() const { return topk_count(rho, L()); }
  double theta_value() const { return theta ? *theta : 1.0 / static_cast<double>(L()); }

  AdamWConfig adamw(double lr_override = 0.0) const {
    return AdamWConfig{lr_override > 0 ? lr_override : lr, beta1, beta2, adam_eps, weight_decay};
  }

  // `lines` maps keys to the line that set them, for diagnostics.
  void validate(const std::map<std::string, std::size_t>& lines = {}) const {
    auto bound = [&](std::string_view key, bool ok, const std::string& msg) {
      if (ok) return;
      if (auto it = lines.find(std::string(key)); it != lines.end()) throw ConfigError(it->second, msg);
      throw ConfigError(msg);
    };
    bound("rho", rho > 0.0 && rho <= 1.0, "rho must satisfy rho in (0, 1], got " + io::format_double(rho));
    bound("tau", tau > 0.0, "tau must be > 0");
    bound("lambda", lambda >= 0.0, "lambda must be >= 0");
    bound("t_ind", t_ind > 0.0, "t_ind must be > 0");
    bound("lr", lr > 0.0, "lr must be > 0");
    bound("finetune_lr", finetune_lr > 0.0, "finetune_lr must be > 0");
    bound("weight_decay", weight_decay >= 0.0, "weight_decay must be >= 0");
    bound("beta1", beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
    bound("beta2", beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
    bound("adam_eps", adam_eps > 0.0, "adam_eps must be > 0");
    bound("P", P > 0 && image_h % P == 0 && image_w % P == 0,
          "image dims must be divisible by the patch size P");
    bound("batch", batch >= 1, "batch must be >= 1");
    bound("finetune_batch", finetune_batch >= 1, "finetune_batch must be >= 1");
    bound("d", d >= 1, "d must be >= 1");
    bound("d_z", d_z >= 1, "d_z must be >= 1");
    bound("n_classes", n_classes >= 2, "n_classes must be >= 2");
    bound("mlp_hidden", mlp_hidden >= 1, "mlp_hidden must be >= 1");
    bound("proj_hidden", proj_hidden >= 1, "proj_hidden must be >= 1");
    bound("flip_prob", flip_prob >= 0.0 && flip_prob <= 1.0, "flip_prob must lie in [0, 1]");
    bound("noise_std", noise_std >= 0.0, "noise_std must be >= 0");
    bound("jitter", jitter >= 0.0 && jitter < 1.0, "jitter must lie in [0, 1)");
    bound("crop_min", crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0,
          "crop scale range must satisfy 0 < crop_min <= crop_max <= 1");
    bound("theta", !theta || (*theta >= 0.0 && *theta <= 1.0), "theta must lie in [0, 1]");
    for (std::size_t w : saliency_hidden) {
      bound("saliency_hidden", w >= 1, "saliency hidden widths must be >= 1");
    }
  }
};

namespace detail {

template <class E, class Parse>
E parse_enum(const io::KvEntry& e, Parse parse) {
  try {
    return parse(e.value);
  } catch (const ConfigError& err) {
    std::string msg = err.what();
    const std::string_view prefix = "config error: ";
    if (msg.starts_with(prefix)) msg.erase(0, prefix.size());
    throw ConfigError(e.line, msg);
  }
}

inline AttentionMode parse_attention(std::string_view s) {
  if (s == "sparse") return AttentionMode::kSparse;
  if (s == "dense") return AttentionMode::kDense;
  throw ConfigError("attention must be sparse|dense");
}
inline SupportSchedule parse_schedule(std::string_view s) {
  if (s == "dynamic") return SupportSchedule::kDynamic;
  if (s == "static") return SupportSchedule::kStatic;
  throw ConfigError("support_schedule must be dynamic|static");
}
inline Precision parse_precision(std::string_view s) {
  if (s == "single") return Precision::kSingle;
  if (s == "double") return Precision::kDouble;
  throw ConfigError("precision must be single|double");
}

}  // namespace detail

// Strict parse: unknown keys, malformed values and violated bounds are
// errors carrying the line number.
inline RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::map<std::string, std::size_t> lines;
  for (const auto& e : io::parse_kv(text)) {
    const std::string& k = e.key;
    auto sz = [&] { return static_cast<std::size_t>(io::to_uint(e)); };
    if (k == "image_h") c.image_h = sz();
    else if (k == "image_w") c.image_w = sz();
    else if (k == "channels") c.channels = sz();
    else if (k == "P") c.P = sz();
    else if (k == "d") c.d = sz();
    else if (k == "n_blocks") c.n_blocks = sz();
    else if (k == "mlp_hidden") c.mlp_hidden = sz();
    else if (k == "saliency_hidden") c.saliency_hidden = io::to_uint_list(e);
    else if (k == "proj_hidden") c.proj_hidden = sz();
    else if (k == "d_z") c.d_z = sz();
    else if (k == "n_classes") c.n_classes = sz();
    else if (k == "saliency_input") c.saliency_input = detail::parse_enum<SaliencyInput>(e, parse_saliency_input);
    else if (k == "rho") c.rho = io::to_double(e);
    else if (k == "tau") c.tau = io::to_double(e);
    else if (k == "lambda") c.lambda = io::to_double(e);
    else if (k == "theta") {
      if (e.value == "auto") c.theta.reset();
      else c.theta = io::to_double(e);
    }
    else if (k == "t_ind") c.t_ind = io::to_double(e);
    else if (k == "bias_mode") c.bias_mode = detail::parse_enum<BiasMode>(e, parse_bias_mode);
    else if (k == "attention") c.attention = detail::parse_enum<AttentionMode>(e, detail::parse_attention);
    else if (k == "support_schedule") c.support_schedule = detail::parse_enum<SupportSchedule>(e, detail::parse_schedule);
    else if (k == "alt_period") c.alt_period = sz();
    else if (k == "batch") c.batch = sz();
    else if (k == "lr") c.lr = io::to_double(e);
    else if (k == "weight_decay") c.weight_decay = io::to_double(e);
    else if (k == "beta1") c.beta1 = io::to_double(e);
    else if (k == "beta2") c.beta2 = io::to_double(e);
    else if (k == "adam_eps") c.adam_eps = io::to_double(e);
    else if (k == "steps") c.steps = sz();
    else if (k == "finetune_steps") c.finetune_steps = sz();
    else if (k == "finetune_batch") c.finetune_batch = sz();
    else if (k == "finetune_lr") c.finetune_lr = io::to_double(e);
    else if (k == "reuse_cache") c.reuse_cache = io::to_bool(e);
    else if (k == "labeled") c.labeled = sz();
    else if (k == "precision") c.precision = detail::parse_enum<Precision>(e, detail::parse_precision);
    else if (k == "seed") { c.seed = io::to_uint(e); c.seed_set = true; }
    else if (k == "flip_prob") c.flip_prob = io::to_double(e);
    else if (k == "noise_std") c.noise_std = io::to_double(e);
    else if (k == "jitter") c.jitter = io::to_double(e);
    else if (k == "crop_min") c.crop_min = io::to_double(e);
    else if (k == "crop_max") c.crop_max = io::to_double(e);
    else if (k == "log_every") c.log_every = sz();
    else throw ConfigError(e.line, "unknown key '" + k + "'");
    lines[k] = e.line;
  }
  c.validate(lines);
  return c;
}

// SC_SEED supplies the seed when the config leaves it unset; setting both is
// ambiguous and rejected.
inline void apply_seed_env(RunConfig& c, const char* env_value) {
  if (env_value == nullptr) return;
  if (c.seed_set) throw ConfigError("seed set in both the config and SC_SEED");
  io::KvEntry e{"SC_SEED", env_value, 0};
  c.seed = io::to_uint(e);
}

// Canonical text form: every key, fixed order, shortest round-trip reals.
inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  auto D = io::format_double;
  auto list = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  os << "image_h = " << c.image_h << "\nimage_w = " << c.image_w << "\nchannels = " << c.channels
     << "\nP = " << c.P << "\nd = " << c.d << "\nn_blocks = " << c.n_blocks
     << "\nmlp_hidden = " << c.mlp_hidden << "\nsaliency_hidden = " << list(c.saliency_hidden)
     << "\nproj_hidden = " << c.proj_hidden << "\nd_z = " << c.d_z
     << "\nn_classes = " << c.n_classes << "\nsaliency_input = " << to_string(c.saliency_input)
     << "\nrho = " << D(c.rho) << "\ntau = " << D(c.tau) << "\nlambda = " << D(c.lambda)
     << "\ntheta = " << (c.theta ? D(*c.theta) : std::string("auto")) << "\nt_ind = " << D(c.t_ind)
     << "\nbias_mode = " << to_string(c.bias_mode) << "\nattention = " << to_string(c.attention)
     << "\nsupport_schedule = " << to_string(c.support_schedule)
     << "\nalt_period = " << c.alt_period << "\nbatch = " << c.batch << "\nlr = " << D(c.lr)
     << "\nweight_decay = " << D(c.weight_decay) << "\nbeta1 = " << D(c.beta1)
     << "\nbeta2 = " << D(c.beta2) << "\nadam_eps = " << D(c.adam_eps) << "\nsteps = " << c.steps
     << "\nfinetune_steps = " << c.finetune_steps << "\nfinetune_batch = " << c.finetune_batch
     << "\nfinetune_lr = " << D(c.finetune_lr)
     << "\nreuse_cache = " << (c.reuse_cache ? "true" : "false") << "\nlabeled = " << c.labeled
     << "\nprecision = " << to_string(c.precision) << "\nseed = " << c.seed
     << "\nflip_prob = " << D(c.flip_prob) << "\nnoise_std = " << D(c.noise_std)
     << "\njitter = " << D(c.jitter) << "\ncrop_min = " << D(c.crop_min)
     << "\ncrop_max = " << D(c.crop_max) << "\nlog_every = " << c.log_every << "\n";
  return os.str();
}

}  // namespace sc

#endif  // SC_CONFIG_HPP_
