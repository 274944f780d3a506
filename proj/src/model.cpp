#include "vidt/model.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "vidt/error.hpp"

namespace vidt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t v = 0;
  const auto* end = value.data() + value.size();
  const auto r = std::from_chars(value.data(), end, v);
  if (value.empty() || r.ec != std::errc() || r.ptr != end) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + value + "'");
  }
  return v;
}

Real parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const Real v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + value + "'");
}

template <typename T, typename F>
std::array<T, kStages> parse_stages(const std::string& key, const std::string& value, F parse_one) {
  const auto items = split_list(value);
  if (items.size() != kStages) {
    throw ConfigError("config: " + key + " expects " + std::to_string(kStages) + " comma-separated values, got '" +
                      value + "'");
  }
  std::array<T, kStages> out{};
  for (std::size_t s = 0; s < kStages; ++s) out[s] = parse_one(key, items[s]);
  return out;
}

template <typename T>
std::string join(const std::array<T, kStages>& v) {
  std::string out;
  for (std::size_t s = 0; s < kStages; ++s) {
    if (s) out += ",";
    if constexpr (std::is_same_v<T, bool>) {
      out += v[s] ? "true" : "false";
    } else {
      out += std::to_string(v[s]);
    }
  }
  return out;
}

template <typename Parse>
auto rethrow_as_config(const std::string& key, const std::string& value, Parse parse) {
  try {
    return parse(value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config: bad value '" + value + "' for " + key + ": " + e.what());
  }
}

using Setter = std::function<void(DetectorConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"image_size", [](auto& c, auto& k, auto& v) { c.backbone.image_size = parse_size(k, v); }},
      {"patch", [](auto& c, auto& k, auto& v) { c.backbone.patch = parse_size(k, v); }},
      {"embed_dim", [](auto& c, auto& k, auto& v) { c.backbone.embed_dim = parse_size(k, v); }},
      {"depths", [](auto& c, auto& k, auto& v) { c.backbone.depths = parse_stages<std::size_t>(k, v, parse_size); }},
      {"heads", [](auto& c, auto& k, auto& v) { c.backbone.heads = parse_stages<std::size_t>(k, v, parse_size); }},
      {"window", [](auto& c, auto& k, auto& v) { c.backbone.window = parse_size(k, v); }},
      {"det_tokens", [](auto& c, auto& k, auto& v) { c.backbone.det_tokens = parse_size(k, v); }},
      {"cross", [](auto& c, auto& k, auto& v) { c.backbone.cross = parse_stages<bool>(k, v, parse_bool); }},
      {"self_det", [](auto& c, auto& k, auto& v) { c.backbone.self_det = parse_stages<bool>(k, v, parse_bool); }},
      {"encoding",
       [](auto& c, auto& k, auto& v) {
         c.backbone.encoding.mode = rethrow_as_config(k, v, [](auto& s) { return parse_spatial_encoding(s); });
       }},
      {"mlp_ratio", [](auto& c, auto& k, auto& v) { c.backbone.mlp_ratio = parse_size(k, v); }},
      {"dropout",
       [](auto& c, auto& k, auto& v) {
         c.backbone.dropout = parse_real(k, v);
         c.neck.dropout = c.backbone.dropout;
       }},
      {"neck", [](auto& c, auto& k, auto& v) { c.use_neck = parse_bool(k, v); }},
      {"neck_width", [](auto& c, auto& k, auto& v) { c.neck.width = parse_size(k, v); }},
      {"neck_heads", [](auto& c, auto& k, auto& v) { c.neck.heads = parse_size(k, v); }},
      {"neck_points", [](auto& c, auto& k, auto& v) { c.neck.points = parse_size(k, v); }},
      {"neck_layers", [](auto& c, auto& k, auto& v) { c.neck.layers = parse_size(k, v); }},
      {"neck_ffn", [](auto& c, auto& k, auto& v) { c.neck.ffn_hidden = parse_size(k, v); }},
      {"box_refinement", [](auto& c, auto& k, auto& v) { c.neck.box_refinement = parse_bool(k, v); }},
      {"head_sharing",
       [](auto& c, auto& k, auto& v) {
         c.neck.head_sharing = rethrow_as_config(k, v, [](auto& s) { return parse_head_sharing(s); });
       }},
      {"classes", [](auto& c, auto& k, auto& v) { c.classes = parse_size(k, v); }},
      {"class_mode",
       [](auto& c, auto& k, auto& v) {
         c.class_mode = rethrow_as_config(k, v, [](auto& s) { return parse_class_mode(s); });
       }},
  };
  return table;
}

}  // namespace

void DetectorConfig::validate() const {
  backbone.validate();
  if (use_neck) neck.validate();
  if (classes == 0) throw ConfigError("config: classes must be positive");
}

DetectorConfig parse_detector_config(const std::string& text) {
  DetectorConfig cfg;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value, got '" + line + "'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    it->second(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

DetectorConfig load_detector_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_detector_config(ss.str());
}

std::string format_detector_config(const DetectorConfig& cfg) {
  const auto& b = cfg.backbone;
  const auto& n = cfg.neck;
  std::ostringstream out;
  out << "image_size = " << b.image_size << "\n"
      << "patch = " << b.patch << "\n"
      << "embed_dim = " << b.embed_dim << "\n"
      << "depths = " << join(b.depths) << "\n"
      << "heads = " << join(b.heads) << "\n"
      << "window = " << b.window << "\n"
      << "det_tokens = " << b.det_tokens << "\n"
      << "cross = " << join(b.cross) << "\n"
      << "self_det = " << join(b.self_det) << "\n"
      << "encoding = " << to_string(b.encoding.mode) << "\n"
      << "mlp_ratio = " << b.mlp_ratio << "\n"
      << "dropout = " << b.dropout << "\n"
      << "neck = " << (cfg.use_neck ? "true" : "false") << "\n"
      << "neck_width = " << n.width << "\n"
      << "neck_heads = " << n.heads << "\n"
      << "neck_points = " << n.points << "\n"
      << "neck_layers = " << n.layers << "\n"
      << "neck_ffn = " << n.ffn_hidden << "\n"
      << "box_refinement = " << (n.box_refinement ? "true" : "false") << "\n"
      << "head_sharing = " << to_string(n.head_sharing) << "\n"
      << "classes = " << cfg.classes << "\n"
      << "class_mode = " << to_string(cfg.class_mode) << "\n";
  return out.str();
}

Detector Detector::init(const DetectorConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Detector d;
  d.cfg = cfg;
  d.backbone = Backbone::init(cfg.backbone, rng);
  if (cfg.use_neck) {
    d.neck = Neck::init(cfg.neck, cfg.backbone, cfg.classes, cfg.class_mode, rng);
  } else {
    d.direct = DetectionHead::init(cfg.backbone.channel_dim(kStages - 1), cfg.classes, cfg.class_mode, rng);
  }
  return d;
}

DetectorOutput Detector::forward(const Tensor& image, std::mt19937_64* dropout_rng) const {
  auto body = backbone.forward(image, dropout_rng);
  DetectorOutput out;
  out.det = body.det.tokens;
  if (cfg.use_neck) {
    auto n = neck.forward(body, dropout_rng);
    out.layers = std::move(n.layers);
    out.memory = std::move(n.memory);
  } else {
    auto h = direct(body.det.tokens, Tensor());
    out.layers.push_back({body.det.tokens, h.boxes, h.logits, Tensor()});
  }
  return out;
}

void Detector::collect(NamedTensors& out) const {
  backbone.collect(out, "backbone");
  if (cfg.use_neck) {
    neck.collect(out, "neck");
  } else {
    direct.collect(out, "head");
  }
}

void Detector::load(const NamedTensors& entries) {
  NamedTensors params;
  collect(params);
  if (params.size() != entries.size()) {
    throw ContractError("checkpoint holds " + std::to_string(entries.size()) + " parameters, the model has " +
                        std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const auto& src = find_tensor(entries, name);
    if (src.shape() != t.shape()) {
      throw DimensionError("checkpoint entry " + name + " has shape " + shape_str(src.shape()) + ", expected " +
                           shape_str(t.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

DistillTokens distill_tokens(const DetectorOutput& out) {
  if (out.memory.empty()) throw ConfigError("distillation needs a detector with a neck");
  std::vector<Tensor> patches, dets;
  for (const auto& m : out.memory) patches.push_back(m.tokens);
  for (const auto& l : out.layers) dets.push_back(l.tokens);
  return {ops::concat(patches, 0), ops::concat(dets, 0)};
}

Detector drop_decoder_layers(const Detector& model, std::size_t drop_n) {
  if (!model.cfg.use_neck) throw ConfigError("layer drop needs a detector with a neck");
  Detector d = model;
  d.neck = layer_drop(model.neck, drop_n);
  d.cfg.neck.layers = d.neck.layers.size();
  return d;
}

}  // namespace vidt
