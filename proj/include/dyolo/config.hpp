#pragma once

// Run configuration: an INI file with sections [data] [model] [adaption]
// [fusion] [train], checked against a fixed schema. Every key can be
// overridden from the command line as section.key=value.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyolo/train.hpp"

namespace dyolo {

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string help;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema{
      {"data.root", "", "dataset directory containing manifest.tsv"},
      {"data.train", "200", "training images to synthesise"},
      {"data.test", "50", "test images to synthesise"},
      {"data.seed", "7", "dataset seed"},
      {"data.width", "64", "image width (multiple of 32)"},
      {"data.height", "64", "image height (multiple of 32)"},
      {"data.classes", "person,bicycle,car,motorcycle,bus", "kept classes, comma separated"},
      {"data.atmospheric_light", "0.5", "airlight A"},
      {"data.beta_min", "0.07", "lower bound of the sampled scattering coefficient"},
      {"data.beta_max", "0.12", "upper bound of the sampled scattering coefficient"},
      {"data.rain", "false", "add rain streaks to hazy images"},
      {"data.import_annotations", "", "VOC-style annotation directory to import instead of toy scenes"},
      {"data.import_images", "", "image directory for imports (default: annotation directory)"},
      {"model.ablation", "V5", "module combination V0..V6; 'custom' uses the toggles below"},
      {"model.dual_branch", "true", "keep the hazy branch next to the dehazed one (custom only)"},
      {"model.use_cfe", "true", "clear feature extraction branch during training (custom only)"},
      {"model.use_fa", "true", "feature adaption stacks (custom only)"},
      {"model.use_af", "true", "attention fusion of the two branches (custom only)"},
      {"model.conv_kind", "od", "FA convolution: od|plain|se (custom only)"},
      {"model.stem_channels", "16", "stem width"},
      {"model.channels", "32,64,128", "channels at strides 8,16,32"},
      {"model.od_kernels", "4", "ODConv candidate kernels n"},
      {"model.od_reduction", "0.25", "ODConv squeeze ratio"},
      {"adaption.loss", "cwd", "adaption loss: cwd|mimic_l1|mimic_l2"},
      {"adaption.tau", "1.0", "distillation temperature"},
      {"adaption.scale_weights", "0.7,0.2,0.1", "per-scale loss weights, finest first"},
      {"fusion.pool", "4", "attention fusion pooling window r"},
      {"train.lr0", "0.01", "initial learning rate"},
      {"train.lr_floor", "0.0001", "learning rate at the final epoch"},
      {"train.momentum", "0.9", "SGD momentum"},
      {"train.weight_decay", "0.0005", "L2 weight decay (weights only)"},
      {"train.grad_clip", "10", "global gradient norm clip, 0 disables"},
      {"train.epochs", "40", "total epochs"},
      {"train.batch", "8", "batch size"},
      {"train.joint_phase_epochs", "-1", "epochs of joint training before FA freezes; -1 = 30%"},
      {"train.lambda_det", "1.0", "detection loss weight lambda1"},
      {"train.lambda_mode", "dynamic", "adaption weight: fixed|dynamic"},
      {"train.lambda_adapt", "1.0", "adaption loss weight lambda2 in fixed mode"},
      {"train.lambda2_init", "2.0", "lambda2 at each epoch start in dynamic mode"},
      {"train.mosaic", "false", "mosaic augmentation (unsupported, must stay false)"},
      {"train.seed", "1", "training seed"},
      {"train.cfe_epochs", "40", "clean-image pretraining epochs for the CFE teacher"},
      {"train.val_conf_threshold", "0.01", "score threshold for validation detections"},
  };
  return schema;
}

class ConfigTree {
 public:
  ConfigTree() {
    for (const auto& k : config_schema()) values_[k.key] = k.default_value;
  }

  static ConfigTree from_ini(const std::filesystem::path& path) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
      pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
    ConfigTree cfg;
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ValidationError("config: key '" + section + "' outside a section");
      for (const auto& [key, value] : body) cfg.set(section + "." + key, value.get_value<std::string>());
    }
    return cfg;
  }

  static ConfigTree from_json(const nlohmann::json& j) {
    ConfigTree cfg;
    for (const auto& [k, v] : j.items()) cfg.set(k, v.get<std::string>());
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.contains(key)) throw ValidationError("config: unknown key '" + key + "'");
    values_[key] = value;
  }

  // "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ValidationError("override '" + assignment + "' is not key=value");
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("config: unknown key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(get(key), &used);
      if (used != get(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::logic_error&) {
      throw ValidationError("config: " + key + " = '" + get(key) + "' is not a number");
    }
  }

  long get_int(const std::string& key) const {
    try {
      std::size_t used = 0;
      const long v = std::stol(get(key), &used);
      if (used != get(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::logic_error&) {
      throw ValidationError("config: " + key + " = '" + get(key) + "' is not an integer");
    }
  }

  bool get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValidationError("config: " + key + " = '" + v + "' is not a boolean");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto b = item.find_first_not_of(" \t");
      const auto e = item.find_last_not_of(" \t");
      if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  std::string to_ini() const {
    std::ostringstream out;
    std::string section;
    for (const auto& k : config_schema()) {
      const auto dot = k.key.find('.');
      const auto s = k.key.substr(0, dot);
      if (s != section) {
        out << (section.empty() ? "" : "\n") << "[" << s << "]\n";
        section = s;
      }
      out << k.key.substr(dot + 1) << " = " << values_.at(k.key) << "\n";
    }
    return out.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed views. Each validates what it reads.

inline HazeParams haze_params(const ConfigTree& c) {
  HazeParams h;
  h.atmospheric_light = c.get_double("data.atmospheric_light");
  h.beta_min = c.get_double("data.beta_min");
  h.beta_max = c.get_double("data.beta_max");
  try {
    h.validate();
  } catch (const InvalidArgument& e) {
    throw ValidationError(e.what());
  }
  return h;
}

inline DatasetSpec dataset_spec(const ConfigTree& c, const std::filesystem::path& out_dir) {
  DatasetSpec s;
  s.out_dir = out_dir;
  s.train = static_cast<int>(c.get_int("data.train"));
  s.test = static_cast<int>(c.get_int("data.test"));
  s.seed = static_cast<std::uint64_t>(c.get_int("data.seed"));
  s.width = static_cast<int>(c.get_int("data.width"));
  s.height = static_cast<int>(c.get_int("data.height"));
  if (s.width % 32 != 0 || s.height % 32 != 0 || s.width < 32 || s.height < 32) {
    throw ValidationError("data.width and data.height must be positive multiples of 32");
  }
  s.classes = c.get_list("data.classes");
  s.haze = haze_params(c);
  s.rain = c.get_bool("data.rain");
  if (!c.get("data.import_annotations").empty()) s.import_annotations = c.get("data.import_annotations");
  if (!c.get("data.import_images").empty()) s.import_images = c.get("data.import_images");
  return s;
}

inline DetectorConfig detector_config(const ConfigTree& c) {
  const auto& ablation = c.get("model.ablation");
  DetectorConfig m;
  if (ablation == "custom") {
    m.dual_branch = c.get_bool("model.dual_branch");
    m.use_cfe = c.get_bool("model.use_cfe");
    m.use_fa = c.get_bool("model.use_fa");
    m.use_af = c.get_bool("model.use_af");
    m.conv_kind = conv_kind_from_string(c.get("model.conv_kind"));
  } else {
    m = DetectorConfig::ablation(ablation);
  }
  m.stem_channels = static_cast<int>(c.get_int("model.stem_channels"));
  const auto ch = c.get_list("model.channels");
  if (ch.size() != 3) throw ValidationError("model.channels needs three comma-separated values");
  for (int i = 0; i < 3; ++i) {
    try {
      m.channels[i] = std::stoi(ch[i]);
    } catch (const std::logic_error&) {
      throw ValidationError("model.channels: '" + ch[i] + "' is not an integer");
    }
  }
  m.od_kernels = static_cast<int>(c.get_int("model.od_kernels"));
  m.od_reduction = c.get_double("model.od_reduction");
  m.fusion_pool = static_cast<int>(c.get_int("fusion.pool"));
  m.validate();
  return m;
}

inline AdaptionLossConfig adaption_config(const ConfigTree& c) {
  AdaptionLossConfig a;
  a.kind = adaption_loss_kind_from_string(c.get("adaption.loss"));
  a.tau = c.get_double("adaption.tau");
  const auto w = c.get_list("adaption.scale_weights");
  if (w.size() != 3) throw ValidationError("adaption.scale_weights needs three values");
  for (int i = 0; i < 3; ++i) {
    try {
      a.scale_weights[i] = std::stod(w[i]);
    } catch (const std::logic_error&) {
      throw ValidationError("adaption.scale_weights: '" + w[i] + "' is not a number");
    }
  }
  try {
    a.validate();
  } catch (const InvalidArgument& e) {
    throw ValidationError(e.what());
  }
  return a;
}

inline TrainConfig train_config(const ConfigTree& c) {
  TrainConfig t;
  t.lr0 = c.get_double("train.lr0");
  t.lr_floor = c.get_double("train.lr_floor");
  t.momentum = c.get_double("train.momentum");
  t.weight_decay = c.get_double("train.weight_decay");
  t.grad_clip = c.get_double("train.grad_clip");
  t.epochs = static_cast<int>(c.get_int("train.epochs"));
  t.batch = static_cast<int>(c.get_int("train.batch"));
  t.joint_phase_epochs = static_cast<int>(c.get_int("train.joint_phase_epochs"));
  t.lambda_det = c.get_double("train.lambda_det");
  t.lambda_mode = lambda_mode_from_string(c.get("train.lambda_mode"));
  t.lambda_adapt = c.get_double("train.lambda_adapt");
  t.lambda2_init = c.get_double("train.lambda2_init");
  t.mosaic = c.get_bool("train.mosaic");
  t.seed = static_cast<std::uint64_t>(c.get_int("train.seed"));
  t.cfe_epochs = static_cast<int>(c.get_int("train.cfe_epochs"));
  t.val_conf_threshold = c.get_double("train.val_conf_threshold");
  t.validate();
  return t;
}

// The snapshot stored in checkpoints leaves out where the data lives, so a
// moved dataset still resumes and identical runs give identical archives.
inline TrainSetup train_setup(const ConfigTree& c) {
  auto snapshot = c.to_json();
  for (const char* k : {"data.root", "data.import_annotations", "data.import_images"}) snapshot.erase(k);
  return TrainSetup{detector_config(c), adaption_config(c), train_config(c), std::move(snapshot)};
}

}  // namespace dyolo
