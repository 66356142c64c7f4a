#include "idc/corpus.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace idc {

using json = nlohmann::json;

namespace {

// --- change type names ---

const std::vector<std::string>& change_names() {
  static const std::vector<std::string> kNames = {
      "color", "texture", "move", "add", "drop", "distractor", "none"};
  return kNames;
}

// --- template machinery ---

struct SlotDef {
  std::string name;
  Tag tag;
};

enum Slot {
  kSlotSize,
  kSlotColor,
  kSlotShape,
  kSlotMaterial,
  kSlotNewColor,
  kSlotNewMat,
  kSlotSize2,
  kSlotColor2,
  kSlotShape2,
  kNumSlots
};

const std::array<SlotDef, kNumSlots>& slot_defs() {
  static const std::array<SlotDef, kNumSlots> kDefs = {{
      {"size", Tag::kJJ},
      {"color", Tag::kJJ},
      {"shape", Tag::kNN},
      {"material", Tag::kNN},
      {"newcolor", Tag::kJJ},
      {"newmat", Tag::kNN},
      {"size2", Tag::kJJ},
      {"color2", Tag::kJJ},
      {"shape2", Tag::kNN},
  }};
  return kDefs;
}

const std::vector<std::string>& shape_words() {
  static const std::vector<std::string> kWords = {"ball",  "cube",   "cylinder",
                                                  "cone", "sphere", "block"};
  return kWords;
}
const std::vector<std::string>& color_words() {
  static const std::vector<std::string> kWords = {
      "red", "blue", "green", "yellow", "purple", "cyan", "gray", "brown"};
  return kWords;
}
const std::vector<std::string>& size_words() {
  static const std::vector<std::string> kWords = {"small", "large", "tiny"};
  return kWords;
}
const std::vector<std::string>& material_words() {
  static const std::vector<std::string> kWords = {"rubber", "metal", "glass"};
  return kWords;
}

const std::map<std::string, Tag>& literal_tags() {
  static const std::map<std::string, Tag> kTags = {
      {"the", Tag::kOther},      {"a", Tag::kOther},
      {"its", Tag::kOther},      {"to", Tag::kOther},
      {"of", Tag::kOther},       {"is", Tag::kVB},
      {"was", Tag::kOther},      {"has", Tag::kOther},
      {"now", Tag::kOther},      {"turned", Tag::kVB},
      {"changed", Tag::kVB},     {"looks", Tag::kVB},
      {"made", Tag::kVB},        {"from", Tag::kOther},
      {"into", Tag::kOther},     {"moved", Tag::kVB},
      {"another", Tag::kOther},  {"spot", Tag::kNN},
      {"location", Tag::kNN},    {"while", Tag::kOther},
      {"stayed", Tag::kVB},      {"put", Tag::kOther},
      {"added", Tag::kVB},       {"there", Tag::kOther},
      {"new", Tag::kJJ},         {"someone", Tag::kOther},
      {"missing", Tag::kJJ},     {"removed", Tag::kVB},
      {"disappeared", Tag::kVB}, {"two", Tag::kOther},
      {"scenes", Tag::kNNS},     {"seem", Tag::kVB},
      {"identical", Tag::kJJ},   {"no", Tag::kOther},
      {"change", Tag::kNN},      {"color", Tag::kNN},
      {"scene", Tag::kNN},       {"remains", Tag::kVB},
      {"same", Tag::kJJ},
  };
  return kTags;
}

struct TplToken {
  std::string literal;  // empty when slot >= 0
  Tag tag = Tag::kOther;
  int slot = -1;
};

struct Template {
  std::vector<TplToken> tokens;
  std::vector<Span> entity_spans;
};

// Templates are written with {slot} placeholders; "<" and ">" bracket an
// entity mention.
Template parse_template(const std::string& text) {
  Template tpl;
  std::istringstream in(text);
  std::string tok;
  int open = -1;
  while (in >> tok) {
    if (tok == "<") {
      open = int(tpl.tokens.size());
      continue;
    }
    if (tok == ">") {
      tpl.entity_spans.push_back({open, int(tpl.tokens.size()) - open});
      open = -1;
      continue;
    }
    TplToken t;
    if (tok.front() == '{' && tok.back() == '}') {
      const std::string name = tok.substr(1, tok.size() - 2);
      for (int s = 0; s < kNumSlots; ++s) {
        if (slot_defs()[size_t(s)].name == name) {
          t.slot = s;
          t.tag = slot_defs()[size_t(s)].tag;
          break;
        }
      }
      if (t.slot < 0) throw std::logic_error("bad template slot: " + name);
    } else {
      t.literal = tok;
      auto it = literal_tags().find(tok);
      if (it == literal_tags().end()) {
        throw std::logic_error("untagged template literal: " + tok);
      }
      t.tag = it->second;
    }
    tpl.tokens.push_back(t);
  }
  return tpl;
}

const std::array<std::vector<Template>, kNumSynthChangeTypes>& templates() {
  static const auto kTemplates = [] {
    std::array<std::vector<Template>, kNumSynthChangeTypes> t;
    t[size_t(ChangeType::kColor)] = {
        parse_template("the < {size} {material} {shape} > turned {newcolor}"),
        parse_template(
            "the < {size} {material} {shape} > changed its color to {newcolor}"),
        parse_template("now the < {size} {material} {shape} > looks {newcolor}"),
    };
    t[size_t(ChangeType::kTexture)] = {
        parse_template("the < {size} {color} {shape} > is now made of {newmat}"),
        parse_template(
            "the < {size} {color} {shape} > changed from {material} to {newmat}"),
        parse_template("the < {size} {color} {shape} > turned into {newmat}"),
    };
    t[size_t(ChangeType::kMove)] = {
        parse_template("the < {size} {color} {shape} > moved to another spot"),
        parse_template("the < {size} {color} {shape} > changed its location"),
        parse_template("the < {size} {color} {shape} > moved while the "
                       "< {size2} {color2} {shape2} > stayed put"),
    };
    t[size_t(ChangeType::kAdd)] = {
        parse_template("a < {size} {color} {shape} > was added"),
        parse_template("there is a new < {size} {color} {shape} >"),
        parse_template("someone added a < {size} {color} {shape} >"),
    };
    t[size_t(ChangeType::kDrop)] = {
        parse_template("the < {size} {color} {shape} > is missing"),
        parse_template("the < {size} {color} {shape} > was removed"),
        parse_template("the < {size} {color} {shape} > has disappeared"),
    };
    t[size_t(ChangeType::kDistractor)] = {
        parse_template("the two scenes seem identical"),
        parse_template("no change was made"),
        parse_template("the scene remains the same"),
    };
    return t;
  }();
  return kTemplates;
}

// --- feature rendering ---

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Eigen::RowVectorXd hash_embedding(const std::string& key, int dim) {
  std::mt19937_64 rng(fnv1a(key));
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::RowVectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = dist(rng);
  return 0.5 * v / v.norm();
}

Eigen::RowVectorXd object_embedding(const SceneObject& o, int dim) {
  return hash_embedding("shape:" + shape_words()[size_t(o.shape)], dim) +
         hash_embedding("color:" + color_words()[size_t(o.color)], dim) +
         hash_embedding("size:" + size_words()[size_t(o.size)], dim) +
         hash_embedding("material:" + material_words()[size_t(o.material)],
                        dim);
}

FeatureGrid render_scene(const SyntheticScene& scene, int dim,
                         double noise_amp, std::mt19937_64& rng) {
  FeatureGrid g;
  g.grid = scene.grid;
  g.dim = dim;
  g.source = FeatureGrid::Source::kSynthetic;
  const int n = scene.grid * scene.grid;
  const Eigen::RowVectorXd bg = hash_embedding("background", dim);
  g.cells.resize(n, dim);
  for (int i = 0; i < n; ++i) g.cells.row(i) = bg;
  for (const auto& o : scene.objects) {
    g.cells.row(o.row * scene.grid + o.col) = object_embedding(o, dim);
  }
  std::uniform_real_distribution<double> noise(-noise_amp, noise_amp);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < dim; ++j) g.cells(i, j) += noise(rng);
  }
  return g;
}

// --- scene sampling ---

struct ChangeSpec {
  ChangeType type = ChangeType::kDistractor;
  int target = -1;      // object index in the base scene
  int new_value = -1;   // color/material index or destination cell
  SceneObject added;    // for kAdd
};

int draw(std::mt19937_64& rng, int n) {
  return int(std::uniform_int_distribution<int>(0, n - 1)(rng));
}

int draw_except(std::mt19937_64& rng, int n, int avoid) {
  if (n < 2) {
    throw std::runtime_error(
        "synthetic dataset: attribute palette too small for this change");
  }
  int v = draw(rng, n - 1);
  return v >= avoid ? v + 1 : v;
}

int palette(const SynthConfig& cfg, size_t full) {
  return cfg.palette_limit > 0 ? std::min(cfg.palette_limit, int(full))
                               : int(full);
}

SyntheticScene sample_scene(const SynthConfig& cfg, std::mt19937_64& rng) {
  SyntheticScene s;
  s.grid = cfg.grid;
  const int n_cells = cfg.grid * cfg.grid;
  const int k = cfg.objects_min +
                draw(rng, cfg.objects_max - cfg.objects_min + 1);
  std::vector<int> cells(static_cast<size_t>(n_cells));
  for (int i = 0; i < n_cells; ++i) cells[size_t(i)] = i;
  for (int i = 0; i < k; ++i) {
    const int pick = i + draw(rng, n_cells - i);
    std::swap(cells[size_t(i)], cells[size_t(pick)]);
    SceneObject o;
    o.shape = draw(rng, palette(cfg, shape_words().size()));
    o.color = draw(rng, palette(cfg, color_words().size()));
    o.size = draw(rng, palette(cfg, size_words().size()));
    o.material = draw(rng, palette(cfg, material_words().size()));
    o.row = cells[size_t(i)] / cfg.grid;
    o.col = cells[size_t(i)] % cfg.grid;
    s.objects.push_back(o);
  }
  return s;
}

std::vector<int> free_cells(const SyntheticScene& s) {
  std::set<int> used;
  for (const auto& o : s.objects) used.insert(o.row * s.grid + o.col);
  std::vector<int> out;
  for (int i = 0; i < s.grid * s.grid; ++i) {
    if (!used.count(i)) out.push_back(i);
  }
  return out;
}

ChangeSpec sample_change(const SynthConfig& cfg, ChangeType type,
                         const SyntheticScene& s, std::mt19937_64& rng) {
  ChangeSpec c;
  c.type = type;
  switch (type) {
    case ChangeType::kColor:
      c.target = draw(rng, int(s.objects.size()));
      c.new_value = draw_except(rng, palette(cfg, color_words().size()),
                                s.objects[size_t(c.target)].color);
      break;
    case ChangeType::kTexture:
      c.target = draw(rng, int(s.objects.size()));
      c.new_value = draw_except(rng, palette(cfg, material_words().size()),
                                s.objects[size_t(c.target)].material);
      break;
    case ChangeType::kMove: {
      c.target = draw(rng, int(s.objects.size()));
      const auto free = free_cells(s);
      c.new_value = free[size_t(draw(rng, int(free.size())))];
      break;
    }
    case ChangeType::kAdd: {
      const auto free = free_cells(s);
      const int cell = free[size_t(draw(rng, int(free.size())))];
      c.added.shape = draw(rng, palette(cfg, shape_words().size()));
      c.added.color = draw(rng, palette(cfg, color_words().size()));
      c.added.size = draw(rng, palette(cfg, size_words().size()));
      c.added.material = draw(rng, palette(cfg, material_words().size()));
      c.added.row = cell / s.grid;
      c.added.col = cell % s.grid;
      break;
    }
    case ChangeType::kDrop:
      c.target = draw(rng, int(s.objects.size()));
      break;
    case ChangeType::kDistractor:
      break;
    default:
      throw std::logic_error("sample_change: bad type");
  }
  return c;
}

SyntheticScene apply_change(const SyntheticScene& s, const ChangeSpec& c) {
  SyntheticScene out = s;
  switch (c.type) {
    case ChangeType::kColor:
      out.objects[size_t(c.target)].color = c.new_value;
      break;
    case ChangeType::kTexture:
      out.objects[size_t(c.target)].material = c.new_value;
      break;
    case ChangeType::kMove:
      out.objects[size_t(c.target)].row = c.new_value / s.grid;
      out.objects[size_t(c.target)].col = c.new_value % s.grid;
      break;
    case ChangeType::kAdd:
      out.objects.push_back(c.added);
      break;
    case ChangeType::kDrop:
      out.objects.erase(out.objects.begin() + c.target);
      break;
    case ChangeType::kDistractor:
      break;
    default:
      throw std::logic_error("apply_change: bad type");
  }
  return out;
}

std::string scene_signature(const SyntheticScene& s, const ChangeSpec& c) {
  std::vector<SceneObject> objs = s.objects;
  std::sort(objs.begin(), objs.end(), [](const auto& a, const auto& b) {
    return a.row * 64 + a.col < b.row * 64 + b.col;
  });
  std::ostringstream out;
  out << "g" << s.grid << ";";
  for (const auto& o : objs) {
    out << o.shape << "," << o.color << "," << o.size << "," << o.material
        << "@" << o.row << "." << o.col << ";";
  }
  out << "|" << int(c.type) << ":" << c.target << ":" << c.new_value;
  if (c.type == ChangeType::kAdd) {
    out << ":" << c.added.shape << "," << c.added.color << "," << c.added.size
        << "," << c.added.material << "@" << c.added.row << "." << c.added.col;
  }
  return out.str();
}

std::string slot_value(int slot, const SceneObject& subject,
                       const SceneObject& other, const ChangeSpec& c) {
  switch (slot) {
    case kSlotSize: return size_words()[size_t(subject.size)];
    case kSlotColor: return color_words()[size_t(subject.color)];
    case kSlotShape: return shape_words()[size_t(subject.shape)];
    case kSlotMaterial: return material_words()[size_t(subject.material)];
    case kSlotNewColor: return color_words()[size_t(c.new_value)];
    case kSlotNewMat: return material_words()[size_t(c.new_value)];
    case kSlotSize2: return size_words()[size_t(other.size)];
    case kSlotColor2: return color_words()[size_t(other.color)];
    case kSlotShape2: return shape_words()[size_t(other.shape)];
    default: throw std::logic_error("bad slot");
  }
}

Caption realize_caption(const Template& tpl, const SceneObject& subject,
                        const SceneObject& other, const ChangeSpec& c) {
  Caption cap;
  std::vector<std::string> words;
  for (const auto& t : tpl.tokens) {
    words.push_back(t.slot < 0 ? t.literal
                               : slot_value(t.slot, subject, other, c));
    cap.pos_tags.push_back(t.tag);
  }
  std::string text;
  for (const auto& w : words) {
    if (!text.empty()) text.push_back(' ');
    text += w;
  }
  cap.text = text;
  cap.subject_spans = tpl.entity_spans;
  return cap;
}

// --- JSONL helpers ---

json grid_to_json(const FeatureGrid& g) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < g.cells.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < g.cells.cols(); ++j) {
      row.push_back(g.cells(i, j));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

FeatureGrid grid_from_json(const json& rows, const DatasetHeader& hdr,
                           const std::string& where) {
  if (!rows.is_array() || int(rows.size()) != hdr.grid * hdr.grid) {
    throw std::runtime_error(where + ": image must have grid*grid = " +
                             std::to_string(hdr.grid * hdr.grid) + " cells");
  }
  FeatureGrid g;
  g.grid = hdr.grid;
  g.dim = hdr.dim;
  g.source = FeatureGrid::Source::kIngested;
  g.cells.resize(hdr.grid * hdr.grid, hdr.dim);
  for (size_t i = 0; i < rows.size(); ++i) {
    const json& row = rows[i];
    if (!row.is_array() || int(row.size()) != hdr.dim) {
      throw std::runtime_error(where + ": cell " + std::to_string(i) +
                               " must have dim = " + std::to_string(hdr.dim));
    }
    for (size_t j = 0; j < row.size(); ++j) {
      if (!row[j].is_number()) {
        throw std::runtime_error(where + ": non-numeric feature value");
      }
      g.cells(Eigen::Index(i), Eigen::Index(j)) = row[j].get<double>();
    }
  }
  if (!g.cells.allFinite()) {
    throw std::runtime_error(where + ": non-finite feature value");
  }
  if (g.all_zero()) g.source = FeatureGrid::Source::kZeroPadded;
  return g;
}

json caption_fields(const Caption& c) {
  json j;
  j["caption"] = c.text;
  json tags = json::array();
  for (Tag t : c.pos_tags) tags.push_back(tag_name(t));
  j["pos_tags"] = std::move(tags);
  json spans = json::array();
  for (const Span& s : c.subject_spans) {
    spans.push_back(json::array({s.start, s.len}));
  }
  j["subject_spans"] = std::move(spans);
  return j;
}

Caption caption_from_json(const json& j, const std::string& where) {
  Caption c;
  if (!j.contains("caption") || !j["caption"].is_string()) {
    throw std::runtime_error(where + ": missing field caption");
  }
  c.text = normalize_text(j["caption"].get<std::string>());
  const size_t n_words = split_words(c.text).size();
  if (j.contains("pos_tags") && !j["pos_tags"].is_null()) {
    for (const auto& t : j["pos_tags"]) {
      c.pos_tags.push_back(tag_from_name(t.get<std::string>()));
    }
  } else {
    c.pos_tags.assign(n_words, Tag::kOther);
  }
  if (c.pos_tags.size() != n_words) {
    throw std::runtime_error(where + ": pos_tags length " +
                             std::to_string(c.pos_tags.size()) +
                             " != word count " + std::to_string(n_words));
  }
  if (j.contains("subject_spans") && !j["subject_spans"].is_null()) {
    for (const auto& s : j["subject_spans"]) {
      if (!s.is_array() || s.size() != 2) {
        throw std::runtime_error(where + ": bad subject span");
      }
      Span span{s[0].get<int>(), s[1].get<int>()};
      if (span.start < 0 || span.len < 1 ||
          size_t(span.start + span.len) > n_words) {
        throw std::runtime_error(where + ": subject span out of range");
      }
      c.subject_spans.push_back(span);
    }
  }
  return c;
}

void write_header(const std::string& jsonl_path, int grid, int dim) {
  json h;
  h["feature_dim"] = dim;
  h["grid_size"] = grid;
  h["version"] = 1;
  std::ofstream out(jsonl_path + ".header.json");
  if (!out) throw std::runtime_error("cannot write " + jsonl_path + ".header.json");
  out << h.dump() << "\n";
}

std::vector<std::pair<int, json>> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::pair<int, json>> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.emplace_back(line_no, json::parse(line));
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

std::string at(const std::string& path, int line_no) {
  return path + ": line " + std::to_string(line_no);
}

void require_fields(const json& j, const std::vector<std::string>& fields,
                    const std::string& where) {
  for (const auto& f : fields) {
    if (!j.contains(f)) {
      throw std::runtime_error(where + ": missing field " + f);
    }
  }
}

}  // namespace

const std::string& change_type_name(ChangeType t) {
  return change_names()[size_t(t)];
}

ChangeType change_type_from_name(const std::string& name) {
  for (size_t i = 0; i < change_names().size(); ++i) {
    if (change_names()[i] == name) return ChangeType(i);
  }
  throw std::invalid_argument("unknown change type: " + name);
}

void assign_token_ids(Caption& c, const Vocabulary& vocab) {
  const auto words = split_words(c.text);
  if (!c.pos_tags.empty() && c.pos_tags.size() != words.size()) {
    throw std::invalid_argument("caption tags do not match word count");
  }
  c.tokens.clear();
  for (const auto& w : words) c.tokens.push_back(vocab.id_of(w));
  if (c.pos_tags.empty()) c.pos_tags.assign(words.size(), Tag::kOther);
}

FeatureGrid FeatureGrid::zero(int grid, int dim) {
  FeatureGrid g;
  g.grid = grid;
  g.dim = dim;
  g.cells = nn::Matrix::Zero(grid * grid, dim);
  g.source = Source::kZeroPadded;
  return g;
}

std::array<int, kNumSynthChangeTypes> spread_counts(int total) {
  std::array<int, kNumSynthChangeTypes> out{};
  for (int i = 0; i < kNumSynthChangeTypes; ++i) {
    out[size_t(i)] = total / kNumSynthChangeTypes +
                     (i < total % kNumSynthChangeTypes ? 1 : 0);
  }
  return out;
}

SyntheticDataset generate_synthetic_dataset(const SynthConfig& cfg,
                                            uint64_t seed) {
  if (cfg.grid < 2 || cfg.feature_dim < 4) {
    throw std::invalid_argument("synthetic config: grid >= 2 and dim >= 4");
  }
  if (cfg.objects_min < 2 || cfg.objects_max < cfg.objects_min ||
      cfg.objects_max + 1 > cfg.grid * cfg.grid) {
    throw std::invalid_argument("synthetic config: bad object counts");
  }
  std::mt19937_64 rng(seed);
  std::set<std::string> seen;
  SyntheticDataset ds;
  ds.grid = cfg.grid;
  ds.dim = cfg.feature_dim;

  auto emit_split = [&](const std::array<int, kNumSynthChangeTypes>& counts,
                        std::vector<Triplet>& out) {
    for (int type = 0; type < kNumSynthChangeTypes; ++type) {
      for (int i = 0; i < counts[size_t(type)]; ++i) {
        SyntheticScene scene;
        ChangeSpec change;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
          scene = sample_scene(cfg, rng);
          change = sample_change(cfg, ChangeType(type), scene, rng);
          placed = seen.insert(scene_signature(scene, change)).second;
        }
        if (!placed) {
          throw std::runtime_error(
              "synthetic dataset: requested counts exceed distinct-scene "
              "capacity");
        }
        Triplet t;
        t.change_type = ChangeType(type);
        t.img1 = render_scene(scene, cfg.feature_dim, cfg.render_noise, rng);
        if (t.change_type == ChangeType::kDistractor) {
          t.img2 = t.img1;
          std::uniform_real_distribution<double> jit(-cfg.jitter_amplitude,
                                                     cfg.jitter_amplitude);
          for (Eigen::Index r = 0; r < t.img2.cells.rows(); ++r) {
            for (Eigen::Index c2 = 0; c2 < t.img2.cells.cols(); ++c2) {
              t.img2.cells(r, c2) += jit(rng);
            }
          }
        } else {
          const SyntheticScene after = apply_change(scene, change);
          t.img2 =
              render_scene(after, cfg.feature_dim, cfg.render_noise, rng);
        }
        const auto& variants = templates()[size_t(type)];
        const Template& tpl = variants[size_t(draw(rng, int(variants.size())))];
        SceneObject subject;
        SceneObject other;
        if (t.change_type == ChangeType::kAdd) {
          subject = change.added;
        } else if (t.change_type != ChangeType::kDistractor) {
          subject = scene.objects[size_t(change.target)];
        }
        bool needs_other = false;
        for (const auto& tok : tpl.tokens) {
          if (tok.slot >= kSlotSize2) needs_other = true;
        }
        if (needs_other) {
          const int other_idx =
              draw_except(rng, int(scene.objects.size()), change.target);
          other = scene.objects[size_t(other_idx)];
        }
        t.caption = realize_caption(tpl, subject, other, change);
        out.push_back(std::move(t));
      }
    }
  };

  emit_split(cfg.train_counts, ds.train);
  emit_split(cfg.val_counts, ds.val);
  emit_split(cfg.test_counts, ds.test);
  return ds;
}

std::vector<std::string> synthetic_template_lexicon() {
  std::set<std::string> words;
  for (const auto& variants : templates()) {
    for (const auto& tpl : variants) {
      for (const auto& tok : tpl.tokens) {
        if (tok.slot < 0) {
          words.insert(tok.literal);
          continue;
        }
        switch (slot_defs()[size_t(tok.slot)].tag) {
          case Tag::kNN:
            if (tok.slot == kSlotShape || tok.slot == kSlotShape2) {
              words.insert(shape_words().begin(), shape_words().end());
            } else {
              words.insert(material_words().begin(), material_words().end());
            }
            break;
          default:
            if (tok.slot == kSlotSize || tok.slot == kSlotSize2) {
              words.insert(size_words().begin(), size_words().end());
            } else {
              words.insert(color_words().begin(), color_words().end());
            }
            break;
        }
      }
    }
  }
  return {words.begin(), words.end()};
}

std::vector<std::pair<std::string, Tag>> synthetic_tag_lexicon() {
  std::map<std::string, Tag> m;
  for (const auto& [w, t] : literal_tags()) m[w] = t;
  for (const auto& w : shape_words()) m[w] = Tag::kNN;
  for (const auto& w : material_words()) m[w] = Tag::kNN;
  for (const auto& w : color_words()) m[w] = Tag::kJJ;
  for (const auto& w : size_words()) m[w] = Tag::kJJ;
  return {m.begin(), m.end()};
}

uint64_t pair_hash(const FeatureGrid& a, const FeatureGrid& b) {
  uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](const nn::Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double d = m(i, j);
        const unsigned char* bytes =
            reinterpret_cast<const unsigned char*>(&d);
        for (size_t k = 0; k < sizeof(double); ++k) {
          h ^= bytes[k];
          h *= 1099511628211ULL;
        }
      }
    }
  };
  mix(a.cells);
  mix(b.cells);
  return h;
}

void write_triplets(const std::string& path,
                    const std::vector<Triplet>& records, int grid, int dim) {
  write_header(path, grid, dim);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& t : records) {
    json j = caption_fields(t.caption);
    j["change_type"] = change_type_name(t.change_type);
    j["class1"] = t.class1 ? json(*t.class1) : json(nullptr);
    j["class2"] = t.class2 ? json(*t.class2) : json(nullptr);
    j["img1"] = grid_to_json(t.img1);
    j["img2"] = grid_to_json(t.img2);
    out << j.dump() << "\n";
  }
}

std::vector<Triplet> load_triplets(const std::string& path) {
  const DatasetHeader hdr = read_dataset_header(path);
  std::vector<Triplet> out;
  for (const auto& [line_no, j] : read_jsonl(path)) {
    const std::string where = at(path, line_no);
    require_fields(j, {"caption", "change_type", "img1", "img2"}, where);
    Triplet t;
    t.caption = caption_from_json(j, where);
    t.change_type =
        change_type_from_name(j["change_type"].get<std::string>());
    t.img1 = grid_from_json(j["img1"], hdr, where + " (img1)");
    t.img2 = grid_from_json(j["img2"], hdr, where + " (img2)");
    if (j.contains("class1") && !j["class1"].is_null()) {
      t.class1 = j["class1"].get<std::string>();
    }
    if (j.contains("class2") && !j["class2"].is_null()) {
      t.class2 = j["class2"].get<std::string>();
    }
    out.push_back(std::move(t));
  }
  return out;
}

void write_caption_pairs(const std::string& path,
                         const std::vector<CaptionPair>& records, int grid,
                         int dim) {
  write_header(path, grid, dim);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) {
    json j = caption_fields(r.caption);
    j["img1"] = grid_to_json(r.img);
    out << j.dump() << "\n";
  }
}

std::vector<CaptionPair> load_caption_pairs(const std::string& path) {
  const DatasetHeader hdr = read_dataset_header(path);
  std::vector<CaptionPair> out;
  for (const auto& [line_no, j] : read_jsonl(path)) {
    const std::string where = at(path, line_no);
    require_fields(j, {"caption", "img1"}, where);
    CaptionPair r;
    r.caption = caption_from_json(j, where);
    r.img = grid_from_json(j["img1"], hdr, where + " (img1)");
    out.push_back(std::move(r));
  }
  return out;
}

void write_classified_images(const std::string& path,
                             const std::vector<ClassifiedImage>& records,
                             int grid, int dim) {
  write_header(path, grid, dim);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) {
    json j;
    j["class1"] = r.label;
    j["img1"] = grid_to_json(r.img);
    out << j.dump() << "\n";
  }
}

std::vector<ClassifiedImage> load_classified_images(const std::string& path) {
  const DatasetHeader hdr = read_dataset_header(path);
  std::vector<ClassifiedImage> out;
  for (const auto& [line_no, j] : read_jsonl(path)) {
    const std::string where = at(path, line_no);
    require_fields(j, {"class1", "img1"}, where);
    ClassifiedImage r;
    if (!j["class1"].is_string()) {
      throw std::runtime_error(where + ": class1 must be a string");
    }
    r.label = j["class1"].get<std::string>();
    r.img = grid_from_json(j["img1"], hdr, where + " (img1)");
    out.push_back(std::move(r));
  }
  return out;
}

DatasetHeader read_dataset_header(const std::string& jsonl_path) {
  const std::string hpath = jsonl_path + ".header.json";
  std::ifstream in(hpath);
  if (!in) throw std::runtime_error("missing dataset header " + hpath);
  json h;
  try {
    in >> h;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(hpath + ": " + e.what());
  }
  DatasetHeader hdr;
  if (!h.contains("grid_size") || !h.contains("feature_dim")) {
    throw std::runtime_error(hpath + ": needs grid_size and feature_dim");
  }
  hdr.grid = h["grid_size"].get<int>();
  hdr.dim = h["feature_dim"].get<int>();
  hdr.version = h.value("version", 1);
  if (hdr.version != 1) {
    throw std::runtime_error(hpath + ": unsupported format version");
  }
  if (hdr.grid < 1 || hdr.dim < 1) {
    throw std::runtime_error(hpath + ": bad dimensions");
  }
  return hdr;
}

}  // namespace idc
