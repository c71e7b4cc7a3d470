#include "dico/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace dico {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json backbone_json(const BackboneConfig& b) {
  return {{"kind", to_string(b.kind)},         {"base_channels", b.base_channels},
          {"depth", b.depth},                  {"patch_size", b.patch_size},
          {"num_classes", b.num_classes},      {"in_channels", b.in_channels},
          {"embed_dim", b.embed_dim},          {"num_heads", b.num_heads},
          {"norm", to_string(b.norm)}};
}

json extent_json(const Extent3& e) { return json::array({e.h, e.w, e.d}); }

std::string normalization_name(NormalizationMode m) {
  return m == NormalizationMode::zscore ? "zscore" : "window";
}

class Reader {
 public:
  std::vector<std::string> errors;

  void integer(const json& j, const std::string& path, int64_t& out) {
    const auto* v = find(j, path);
    if (!v) return;
    if (!v->is_number_integer()) return fail(path, "expected an integer");
    out = v->get<int64_t>();
  }
  void unsigned_integer(const json& j, const std::string& path, uint64_t& out) {
    const auto* v = find(j, path);
    if (!v) return;
    if (!v->is_number_integer() || v->get<int64_t>() < 0) return fail(path, "expected a non-negative integer");
    out = v->get<uint64_t>();
  }
  void number(const json& j, const std::string& path, double& out) {
    const auto* v = find(j, path);
    if (!v) return;
    if (!v->is_number()) return fail(path, "expected a number");
    out = v->get<double>();
  }
  void boolean(const json& j, const std::string& path, bool& out) {
    const auto* v = find(j, path);
    if (!v) return;
    if (!v->is_boolean()) return fail(path, "expected true or false");
    out = v->get<bool>();
  }
  void string(const json& j, const std::string& path, std::string& out) {
    const auto* v = find(j, path);
    if (!v) return;
    if (!v->is_string()) return fail(path, "expected a string");
    out = v->get<std::string>();
  }
  void extent(const json& j, const std::string& path, Extent3& out) {
    const auto* v = find(j, path);
    if (!v) return;
    if (!v->is_array() || v->size() != 3 || !(*v)[0].is_number_integer() ||
        !(*v)[1].is_number_integer() || !(*v)[2].is_number_integer()) {
      return fail(path, "expected [h, w, d] integers");
    }
    out = {(*v)[0].get<int64_t>(), (*v)[1].get<int64_t>(), (*v)[2].get<int64_t>()};
  }
  template <typename E, typename Parse>
  void choice(const json& j, const std::string& path, E& out, Parse parse) {
    std::string s;
    const auto before = errors.size();
    string(j, path, s);
    if (errors.size() != before || !find(j, path)) return;
    try {
      out = parse(s);
    } catch (const std::exception& e) {
      fail(path, e.what());
    }
  }
  template <typename Fn>
  void check(const std::string& what, Fn fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errors.push_back(what + ": " + e.what());
    }
  }

 private:
  const json* find(const json& j, const std::string& path) {
    const json* cur = &j;
    std::istringstream parts(path);
    for (std::string key; std::getline(parts, key, '.');) {
      if (!cur->is_object() || !cur->contains(key)) return nullptr;
      cur = &(*cur)[key];
    }
    return cur;
  }
  void fail(const std::string& path, const std::string& msg) { errors.push_back(path + ": " + msg); }
};

void check_keys(const json& user, const json& defaults, const std::string& path,
                std::vector<std::string>& errors) {
  if (!user.is_object()) {
    errors.push_back((path.empty() ? std::string("config") : path) + ": expected an object");
    return;
  }
  for (const auto& [key, value] : user.items()) {
    const auto sub = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) {
      errors.push_back(sub + ": unknown key");
      continue;
    }
    if (defaults[key].is_object()) check_keys(value, defaults[key], sub, errors);
  }
}

void read_backbone(Reader& r, const json& j, const std::string& p, BackboneConfig& b) {
  r.choice(j, p + ".kind", b.kind, parse_backbone_kind);
  r.integer(j, p + ".base_channels", b.base_channels);
  r.integer(j, p + ".depth", b.depth);
  r.integer(j, p + ".patch_size", b.patch_size);
  r.integer(j, p + ".num_classes", b.num_classes);
  r.integer(j, p + ".in_channels", b.in_channels);
  r.integer(j, p + ".embed_dim", b.embed_dim);
  r.integer(j, p + ".num_heads", b.num_heads);
  r.choice(j, p + ".norm", b.norm, parse_norm_kind);
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  const auto& n = c.data.normalization;
  return {
      {"data",
       {{"manifest", c.data.manifest.string()},
        {"labeled_fraction", c.data.labeled_fraction},
        {"split_seed", c.data.split_seed},
        {"normalization", normalization_name(n.mode)},
        {"clip_sigma", n.clip_sigma},
        {"window_min", n.window_min},
        {"window_max", n.window_max},
        {"preload", c.data.preload}}},
      {"model",
       {{"m1", backbone_json(c.model.m1)},
        {"m2", backbone_json(c.model.m2)},
        {"multiview",
         {{"enabled", c.model.m2_multiview},
          {"n1", c.model.views.n1},
          {"n2", c.model.views.n2},
          {"n3", c.model.views.n3}}},
        {"discriminator",
         {{"base_channels", c.model.discriminator.base_channels},
          {"layers", c.model.discriminator.layers}}}}},
      {"losses",
       {{"alpha", c.losses.alpha},
        {"beta", c.losses.beta},
        {"lambda_adv", c.losses.lambda_adv},
        {"lambda_u", c.losses.lambda_u},
        {"pseudo_label", to_string(c.pseudo_label)}}},
      {"trainer",
       {{"iterations", c.trainer.total_iterations},
        {"lr_base", c.trainer.lr_base},
        {"gamma", c.trainer.gamma},
        {"batch_size", c.trainer.batch_size},
        {"crop", extent_json(c.trainer.crop)},
        {"crop_mode", to_string(c.trainer.crop_mode)},
        {"seed", c.trainer.seed},
        {"variant", to_string(c.trainer.variant)},
        {"weight_decay", c.trainer.weight_decay},
        {"disc_lr_base", c.trainer.disc_lr_base},
        {"adv_start_iteration", c.trainer.adv_start_iteration},
        {"ema_decay", c.trainer.ema_decay},
        {"checkpoint_interval", c.trainer.checkpoint_interval},
        {"val_interval", c.trainer.val_interval},
        {"audit_gradients", c.trainer.audit_gradients}}},
      {"inference",
       {{"window", extent_json(c.inference.window.window)},
        {"overlap", c.inference.window.overlap},
        {"blending", to_string(c.inference.window.blending)},
        {"average_m1_m2", c.inference.average_m1_m2}}},
      {"metrics",
       {{"tau", c.metrics.tau},
        {"connectivity", static_cast<int>(c.metrics.connectivity)},
        {"spacing_aware", c.metrics.spacing_aware}}},
      {"output_dir", c.output_dir.string()},
  };
}

ExperimentConfig config_from_json(const json& user, const fs::path& base_dir) {
  const ExperimentConfig defaults;
  std::vector<std::string> key_errors;
  check_keys(user, to_json(defaults), "", key_errors);
  if (!key_errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : key_errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }

  ExperimentConfig c = defaults;
  Reader r;
  std::string manifest = c.data.manifest.string();
  r.string(user, "data.manifest", manifest);
  c.data.manifest = manifest;
  if (!c.data.manifest.empty() && c.data.manifest.is_relative() && !base_dir.empty()) {
    c.data.manifest = base_dir / c.data.manifest;
  }
  r.number(user, "data.labeled_fraction", c.data.labeled_fraction);
  r.unsigned_integer(user, "data.split_seed", c.data.split_seed);
  r.choice(user, "data.normalization", c.data.normalization.mode, [](const std::string& s) {
    if (s == "zscore") return NormalizationMode::zscore;
    if (s == "window") return NormalizationMode::window;
    throw ConfigError("expected zscore or window");
  });
  r.number(user, "data.clip_sigma", c.data.normalization.clip_sigma);
  r.number(user, "data.window_min", c.data.normalization.window_min);
  r.number(user, "data.window_max", c.data.normalization.window_max);
  r.boolean(user, "data.preload", c.data.preload);

  read_backbone(r, user, "model.m1", c.model.m1);
  read_backbone(r, user, "model.m2", c.model.m2);
  r.boolean(user, "model.multiview.enabled", c.model.m2_multiview);
  r.integer(user, "model.multiview.n1", c.model.views.n1);
  r.integer(user, "model.multiview.n2", c.model.views.n2);
  r.integer(user, "model.multiview.n3", c.model.views.n3);
  r.integer(user, "model.discriminator.base_channels", c.model.discriminator.base_channels);
  r.integer(user, "model.discriminator.layers", c.model.discriminator.layers);

  r.number(user, "losses.alpha", c.losses.alpha);
  r.number(user, "losses.beta", c.losses.beta);
  r.number(user, "losses.lambda_adv", c.losses.lambda_adv);
  r.number(user, "losses.lambda_u", c.losses.lambda_u);
  r.choice(user, "losses.pseudo_label", c.pseudo_label, parse_pseudo_label_mode);

  auto& t = c.trainer;
  r.integer(user, "trainer.iterations", t.total_iterations);
  r.number(user, "trainer.lr_base", t.lr_base);
  r.number(user, "trainer.gamma", t.gamma);
  r.integer(user, "trainer.batch_size", t.batch_size);
  r.extent(user, "trainer.crop", t.crop);
  r.choice(user, "trainer.crop_mode", t.crop_mode, parse_crop_mode);
  r.unsigned_integer(user, "trainer.seed", t.seed);
  r.choice(user, "trainer.variant", t.variant, parse_variant);
  r.number(user, "trainer.weight_decay", t.weight_decay);
  r.number(user, "trainer.disc_lr_base", t.disc_lr_base);
  r.integer(user, "trainer.adv_start_iteration", t.adv_start_iteration);
  r.number(user, "trainer.ema_decay", t.ema_decay);
  r.integer(user, "trainer.checkpoint_interval", t.checkpoint_interval);
  r.integer(user, "trainer.val_interval", t.val_interval);
  r.boolean(user, "trainer.audit_gradients", t.audit_gradients);

  r.extent(user, "inference.window", c.inference.window.window);
  r.number(user, "inference.overlap", c.inference.window.overlap);
  r.choice(user, "inference.blending", c.inference.window.blending, parse_blending);
  r.boolean(user, "inference.average_m1_m2", c.inference.average_m1_m2);

  r.number(user, "metrics.tau", c.metrics.tau);
  int64_t connectivity = static_cast<int64_t>(c.metrics.connectivity);
  r.integer(user, "metrics.connectivity", connectivity);
  r.boolean(user, "metrics.spacing_aware", c.metrics.spacing_aware);
  std::string out_dir = c.output_dir.string();
  r.string(user, "output_dir", out_dir);
  c.output_dir = out_dir;

  r.check("data.labeled_fraction", [&] {
    if (!(c.data.labeled_fraction > 0 && c.data.labeled_fraction <= 1)) {
      throw ConfigError("must be in (0, 1]");
    }
  });
  r.check("data", [&] {
    if (c.data.normalization.mode == NormalizationMode::window &&
        !(c.data.normalization.window_max > c.data.normalization.window_min)) {
      throw ConfigError("window_max must exceed window_min");
    }
    if (!(c.data.normalization.clip_sigma > 0)) throw ConfigError("clip_sigma must be positive");
  });
  r.check("model.m1", [&] { c.model.m1.validate(); });
  r.check("model.m2", [&] { c.model.m2.validate(); });
  r.check("model.multiview", [&] { c.model.views.validate_factors(); });
  r.check("model.discriminator", [&] { c.model.discriminator.validate(); });
  r.check("model", [&] { c.resolved_models().validate(); });
  r.check("losses", [&] { c.losses.validate(); });
  r.check("trainer", [&] { c.trainer.validate(); });
  r.check("inference", [&] { c.inference.window.validate(); });
  r.check("metrics.tau", [&] {
    if (!(c.metrics.tau > 0)) throw ConfigError("must be positive");
  });
  r.check("metrics.connectivity", [&] {
    if (connectivity != 6 && connectivity != 26) throw ConfigError("must be 6 or 26");
    c.metrics.connectivity = static_cast<Connectivity>(connectivity);
  });
  r.check("trainer.crop", [&] {
    // Every network in the pairing must accept the training crop.
    const auto m = c.resolved_models();
    const auto crop = c.trainer.crop;
    auto divisible = [&](int64_t div, Extent3 e, const char* who) {
      for (auto v : e.as_array()) {
        if (v % div != 0) {
          throw ConfigError(std::string("crop extents must be multiples of ") +
                            std::to_string(div) + " for " + who);
        }
      }
    };
    divisible(m.m1.spatial_divisor(), crop, "m1");
    if (m.m2_multiview) {
      const auto& v = m.views;
      if (crop.h % v.n1 || crop.w % v.n2 || crop.d % v.n3) {
        throw ConfigError("crop extents must be divisible by the multi-view split factors");
      }
      divisible(m.m2.spatial_divisor(), {crop.h / v.n1, crop.w / v.n2, crop.d / v.n3},
                "m2 local views");
    } else {
      divisible(m.m2.spatial_divisor(), crop, "m2");
    }
  });

  if (!r.errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

void apply_overrides(json& j, const std::vector<std::string>& overrides) {
  std::vector<std::string> errors;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      errors.push_back("override '" + o + "': expected section.key=value");
      continue;
    }
    const auto path = o.substr(0, eq);
    const auto text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = text;
    json* cur = &j;
    std::istringstream parts(path);
    std::vector<std::string> keys;
    for (std::string k; std::getline(parts, k, '.');) keys.push_back(k);
    for (size_t i = 0; i + 1 < keys.size(); ++i) {
      if (!cur->is_object()) break;
      cur = &(*cur)[keys[i]];
      if (cur->is_null()) *cur = json::object();
    }
    if (!cur->is_object()) {
      errors.push_back("override '" + o + "': path does not name an object");
      continue;
    }
    (*cur)[keys.back()] = value;
  }
  if (!errors.empty()) {
    std::string msg = "invalid overrides:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false, /*ignore_comments=*/true);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  apply_overrides(j, overrides);
  auto config = config_from_json(j, fs::absolute(path).parent_path());
  if (config.output_dir.is_relative()) {
    if (const char* root = std::getenv("DICO_OUTPUT_ROOT"); root && *root) {
      config.output_dir = fs::path(root) / config.output_dir;
    }
  }
  return config;
}

std::string config_hash(const ExperimentConfig& config) {
  ExperimentConfig shape;
  shape.model = config.resolved_models();
  shape.trainer.variant = config.trainer.variant;
  const json j = {{"model", to_json(shape)["model"]}, {"variant", to_string(config.trainer.variant)}};
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

}  // namespace dico
