#pragma once

// TrainConfig <-> JSON. Every field is optional and default-filled; unknown
// keys are rejected so a typo in a hyperparameter name cannot silently
// corrupt an ablation. When "lambda" is absent it follows the per-shot
// default (4.0 for 1/10-shot, 3.0 for 5-shot).

#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "cdfsod/trainer.hpp"

namespace cdfsod {

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["lambda"] = c.lambda;
  j["delta"] = c.delta;
  j["gamma"] = c.gamma;
  j["alpha"] = c.alpha;
  j["k"] = c.k;
  j["burn_in_iters"] = c.burn_in_iters;
  j["distill_iters"] = c.distill_iters;
  j["lr_decay_iter"] = c.lr_decay_iter;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["ema_enabled"] = c.ema_enabled;
  j["distill_enabled"] = c.distill_enabled;
  j["freeze_backbone"] = c.freeze_backbone;
  j["domain"] = c.domain;
  j["base_iters"] = c.base_iters;
  j["base_images"] = c.base_images;
  j["pool_images"] = c.pool_images;
  j["test_images"] = c.test_images;
  j["snapshot_every"] = c.snapshot_every;
  return j;
}

struct ParsedConfig {
  TrainConfig cfg;
  bool lambda_explicit = false;
};

inline ParsedConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  static const std::set<std::string> known = {
      "lambda",       "delta",         "gamma",       "alpha",
      "k",            "burn_in_iters", "distill_iters", "lr_decay_iter",
      "batch_size",   "seed",          "ema_enabled", "distill_enabled",
      "freeze_backbone", "domain",     "base_iters",  "base_images",
      "pool_images",  "test_images",   "snapshot_every"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");

  ParsedConfig out;
  TrainConfig& c = out.cfg;
  auto load = [&](const char* key, auto& field) {
    if (j.contains(key)) {
      try {
        field = j.at(key).get<std::decay_t<decltype(field)>>();
      } catch (const nlohmann::json::exception&) {
        throw std::invalid_argument(std::string("config: bad value for '") + key + "'");
      }
    }
  };
  load("delta", c.delta);
  load("gamma", c.gamma);
  load("alpha", c.alpha);
  load("k", c.k);
  load("burn_in_iters", c.burn_in_iters);
  load("distill_iters", c.distill_iters);
  load("lr_decay_iter", c.lr_decay_iter);
  load("batch_size", c.batch_size);
  load("seed", c.seed);
  load("ema_enabled", c.ema_enabled);
  load("distill_enabled", c.distill_enabled);
  load("freeze_backbone", c.freeze_backbone);
  load("domain", c.domain);
  load("base_iters", c.base_iters);
  load("base_images", c.base_images);
  load("pool_images", c.pool_images);
  load("test_images", c.test_images);
  load("snapshot_every", c.snapshot_every);
  if (j.contains("lambda")) {
    out.lambda_explicit = true;
    load("lambda", c.lambda);
  } else {
    c.lambda = default_lambda(c.k);
  }
  c.validate();
  return out;
}

}  // namespace cdfsod
