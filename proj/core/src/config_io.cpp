#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "msfcn/trainer.hpp"

namespace msfcn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorKind::kConfig, msg); }

json parse_json(std::string_view text, const std::string& what) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, what + ": invalid JSON at byte " + std::to_string(e.byte));
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) config_error(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    config_error(where + ": field '" + std::string(key) + "' has the wrong type");
  }
}

ModelConfig model_from_json(const json& j) {
  const std::string where = "model config";
  if (j.is_string()) return model_config_preset(j.get<std::string>());
  if (!j.is_object()) config_error(where + ": must be an object or a preset name");
  reject_unknown(j,
                 {"preset", "input_size", "in_channels", "classes", "base_channels", "encoder_pool_ratios",
                  "ms_pooling", "ms_subpath_ratios", "ms_upsample_mode", "ms_group", "ms_compression_channels",
                  "dense_decoder", "dense_decoder_ratios", "decoder_channels", "dropout_p", "bn_momentum",
                  "bn_eps"},
                 where);
  ModelConfig cfg;
  if (j.contains("preset")) {
    if (!j["preset"].is_string()) config_error(where + ": field 'preset' has the wrong type");
    cfg = model_config_preset(j["preset"].get<std::string>());
  }
  read_field(j, "input_size", cfg.input_size, where);
  read_field(j, "in_channels", cfg.in_channels, where);
  read_field(j, "classes", cfg.classes, where);
  read_field(j, "base_channels", cfg.base_channels, where);
  read_field(j, "encoder_pool_ratios", cfg.encoder_pool_ratios, where);
  read_field(j, "ms_pooling", cfg.ms_pooling, where);
  read_field(j, "ms_subpath_ratios", cfg.ms_subpath_ratios, where);
  if (j.contains("ms_upsample_mode")) {
    std::string mode;
    read_field(j, "ms_upsample_mode", mode, where);
    cfg.ms_upsample_mode = parse_upsample_mode(mode);
  }
  read_field(j, "ms_group", cfg.ms_group, where);
  read_field(j, "ms_compression_channels", cfg.ms_compression_channels, where);
  read_field(j, "dense_decoder", cfg.dense_decoder, where);
  read_field(j, "dense_decoder_ratios", cfg.dense_decoder_ratios, where);
  read_field(j, "decoder_channels", cfg.decoder_channels, where);
  read_field(j, "dropout_p", cfg.dropout_p, where);
  read_field(j, "bn_momentum", cfg.bn_momentum, where);
  read_field(j, "bn_eps", cfg.bn_eps, where);
  cfg.validate();
  return cfg;
}

json model_to_json(const ModelConfig& cfg) {
  return json{{"input_size", cfg.input_size},
              {"in_channels", cfg.in_channels},
              {"classes", cfg.classes},
              {"base_channels", cfg.base_channels},
              {"encoder_pool_ratios", cfg.encoder_pool_ratios},
              {"ms_pooling", cfg.ms_pooling},
              {"ms_subpath_ratios", cfg.ms_subpath_ratios},
              {"ms_upsample_mode", std::string(to_string(cfg.ms_upsample_mode))},
              {"ms_group", cfg.ms_group},
              {"ms_compression_channels", cfg.ms_compression_channels},
              {"dense_decoder", cfg.dense_decoder},
              {"dense_decoder_ratios", cfg.dense_decoder_ratios},
              {"decoder_channels", cfg.decoder_channels},
              {"dropout_p", cfg.dropout_p},
              {"bn_momentum", cfg.bn_momentum},
              {"bn_eps", cfg.bn_eps}};
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return (path.is_absolute() || base.empty() ? path : base / path).lexically_normal();
}

}  // namespace

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (!(base_lr > 0.0)) problems.push_back("base_lr: must be > 0");
  if (!(power >= 0.0)) problems.push_back("power: must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) problems.push_back("momentum: must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) problems.push_back("weight_decay: must be >= 0");
  if (max_iter && *max_iter < 0) problems.push_back("max_iter: must be >= 0");
  if (!max_iter && epochs <= 0) problems.push_back("epochs: must be positive");
  if (batch_size <= 0) problems.push_back("batch_size: must be positive");
  if (checkpoint_every < 0) problems.push_back("checkpoint_every: must be >= 0");
  if (output_dir.empty()) problems.push_back("output_dir: must not be empty");
  if (!problems.empty()) {
    std::string msg = "train config: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    config_error(msg);
  }
  model.validate();
}

TrainConfig parse_train_config(std::string_view json_text, const fs::path& base_dir) {
  const json j = parse_json(json_text, "train config");
  const std::string where = "train config";
  if (!j.is_object()) config_error(where + ": top level must be an object");
  reject_unknown(j,
                 {"base_lr", "power", "momentum", "weight_decay", "max_iter", "epochs", "batch_size", "seed",
                  "checkpoint_every", "augment", "model", "train_manifest", "test_manifest", "output_dir"},
                 where);
  TrainConfig cfg;
  read_field(j, "base_lr", cfg.base_lr, where);
  read_field(j, "power", cfg.power, where);
  read_field(j, "momentum", cfg.momentum, where);
  read_field(j, "weight_decay", cfg.weight_decay, where);
  if (j.contains("max_iter") && !j["max_iter"].is_null()) {
    int m = 0;
    read_field(j, "max_iter", m, where);
    cfg.max_iter = m;
  }
  read_field(j, "epochs", cfg.epochs, where);
  read_field(j, "batch_size", cfg.batch_size, where);
  read_field(j, "seed", cfg.seed, where);
  read_field(j, "checkpoint_every", cfg.checkpoint_every, where);
  read_field(j, "augment", cfg.augment, where);
  if (j.contains("model")) cfg.model = model_from_json(j["model"]);
  std::string path;
  if (j.contains("train_manifest")) {
    read_field(j, "train_manifest", path, where);
    cfg.train_manifest = resolve(base_dir, path);
  }
  if (j.contains("test_manifest")) {
    read_field(j, "test_manifest", path, where);
    cfg.test_manifest = resolve(base_dir, path);
  }
  if (j.contains("output_dir")) {
    read_field(j, "output_dir", path, where);
    cfg.output_dir = resolve(base_dir, path);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const fs::path& path) {
  try {
    return parse_train_config(read_text(path), fs::absolute(path).parent_path());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIo) throw;
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j{{"base_lr", cfg.base_lr},
         {"power", cfg.power},
         {"momentum", cfg.momentum},
         {"weight_decay", cfg.weight_decay},
         {"epochs", cfg.epochs},
         {"batch_size", cfg.batch_size},
         {"seed", cfg.seed},
         {"checkpoint_every", cfg.checkpoint_every},
         {"augment", cfg.augment},
         {"model", model_to_json(cfg.model)},
         {"train_manifest", cfg.train_manifest.generic_string()},
         {"test_manifest", cfg.test_manifest.generic_string()},
         {"output_dir", cfg.output_dir.generic_string()}};
  if (cfg.max_iter) j["max_iter"] = *cfg.max_iter;
  return j.dump(2) + "\n";
}

ModelConfig parse_model_config(std::string_view json_text) {
  return model_from_json(parse_json(json_text, "model config"));
}

ModelConfig load_model_config(const std::string& name_or_path) {
  if (name_or_path == "default" || name_or_path == "toy") return model_config_preset(name_or_path);
  const fs::path path(name_or_path);
  if (!fs::exists(path)) {
    config_error("model config '" + name_or_path + "' is neither a preset (default, toy) nor an existing file");
  }
  const json j = parse_json(read_text(path), path.string());
  // A training config carries the model under "model".
  if (j.is_object() && j.contains("model") && !j.contains("input_size")) return model_from_json(j["model"]);
  return model_from_json(j);
}

std::string model_config_to_json(const ModelConfig& cfg) { return model_to_json(cfg).dump(2) + "\n"; }

}  // namespace msfcn
