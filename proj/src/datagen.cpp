#include "semattack/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "semattack/image_io.hpp"

namespace semattack {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr double kAxLevels[5] = {7.0, 7.5, 8.0, 8.5, 9.0};
constexpr double kAyLevels[5] = {9.0, 9.5, 10.0, 10.5, 11.0};
constexpr double kEyeLevels[5] = {3.0, 3.5, 4.0, 4.5, 5.0};
constexpr double kNoseLevels[5] = {2.0, 2.75, 3.5, 4.25, 5.0};
constexpr double kMouthLevels[5] = {2.5, 3.25, 4.0, 4.75, 5.5};
constexpr double kSkinLevels[5][3] = {{0.93, 0.78, 0.66},
                                      {0.85, 0.66, 0.52},
                                      {0.74, 0.55, 0.42},
                                      {0.60, 0.43, 0.32},
                                      {0.47, 0.33, 0.25}};
constexpr double kIrisLevels[5][3] = {{0.25, 0.45, 0.80},
                                      {0.30, 0.60, 0.25},
                                      {0.50, 0.30, 0.12},
                                      {0.10, 0.10, 0.10},
                                      {0.65, 0.65, 0.70}};
// Multiplier coprime with 5^7, so id -> combination is a bijection.
constexpr std::uint64_t kIdentityStride = 40503;

constexpr double kBackground[3] = {0.35, 0.40, 0.45};
constexpr double kHairDark[3] = {0.22, 0.13, 0.07};
constexpr double kHairBlond[3] = {0.92, 0.80, 0.38};

struct Rgb {
  double c[3];
};

Rgb mix(const Rgb& a, const double* b, double t) {
  return {{a.c[0] * (1 - t) + b[0] * t, a.c[1] * (1 - t) + b[1] * t, a.c[2] * (1 - t) + b[2] * t}};
}

bool in_ellipse(double x, double y, double cx, double cy, double ax, double ay) {
  const double dx = (x - cx) / ax;
  const double dy = (y - cy) / ay;
  return dx * dx + dy * dy <= 1.0;
}

bool in_disc(double x, double y, double cx, double cy, double r) {
  return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
}

struct Layout {
  double eye_y;
  double brow_y;
  double mouth_y;
  double face_top;
};

Layout layout_of(const IdentitySpec& id) {
  Layout l{};
  l.eye_y = id.face_cy - 0.35 * id.face_ay;
  l.brow_y = l.eye_y - 2.3;
  l.mouth_y = id.face_cy + 0.5 * id.face_ay;
  l.face_top = id.face_cy - id.face_ay;
  return l;
}

}  // namespace

std::string to_string(RenderRule rule) {
  switch (rule) {
    case RenderRule::EyeBand: return "eye_band";
    case RenderRule::TopBar: return "top_bar";
    case RenderRule::MouthCurve: return "mouth_curve";
    case RenderRule::SkinBright: return "skin_bright";
    case RenderRule::HairHue: return "hair_hue";
    case RenderRule::JawTexture: return "jaw_texture";
    case RenderRule::CheekDots: return "cheek_dots";
    case RenderRule::SideDots: return "side_dots";
  }
  throw ConfigError("unknown render rule");
}

RenderRule render_rule_from_string(const std::string& name) {
  static const std::pair<const char*, RenderRule> table[] = {
      {"eye_band", RenderRule::EyeBand},       {"top_bar", RenderRule::TopBar},
      {"mouth_curve", RenderRule::MouthCurve}, {"skin_bright", RenderRule::SkinBright},
      {"hair_hue", RenderRule::HairHue},       {"jaw_texture", RenderRule::JawTexture},
      {"cheek_dots", RenderRule::CheekDots},   {"side_dots", RenderRule::SideDots},
  };
  for (const auto& [n, r] : table) {
    if (name == n) return r;
  }
  throw ConfigError("unknown render rule: " + name);
}

AttributeSchema AttributeSchema::default_schema() {
  AttributeSchema s;
  s.names = {"glasses", "bangs", "smile", "pale_skin", "hair_color", "beard", "blush", "earrings"};
  s.rules = {RenderRule::EyeBand,  RenderRule::TopBar,     RenderRule::MouthCurve,
             RenderRule::SkinBright, RenderRule::HairHue, RenderRule::JawTexture,
             RenderRule::CheekDots, RenderRule::SideDots};
  return s;
}

int AttributeSchema::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("attribute not in schema: " + name);
  return static_cast<int>(it - names.begin());
}

std::string AttributeSchema::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  };
  for (std::size_t i = 0; i < names.size(); ++i) {
    feed(names[i]);
    feed(to_string(rules.at(i)));
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void AttributeSchema::validate() const {
  if (names.size() < 2) throw ConfigError("schema needs at least 2 attributes");
  if (rules.size() != names.size()) throw ConfigError("schema: one render rule per attribute");
  std::set<std::string> seen(names.begin(), names.end());
  if (seen.size() != names.size()) throw ConfigError("schema: attribute names must be unique");
  std::set<RenderRule> rule_set(rules.begin(), rules.end());
  if (rule_set.size() != rules.size()) throw ConfigError("schema: render rules must be distinct");
}

IdentitySpec IdentitySpec::from_id(int identity_id, std::uint64_t seed) {
  if (identity_id < 0 || identity_id >= kMaxIdentities) {
    throw InputError("identity id out of range: " + std::to_string(identity_id));
  }
  IdentitySpec id;
  id.identity_id = identity_id;
  id.geometry_seed = seed;
  const std::uint64_t offset = splitmix64(seed) % kMaxIdentities;
  std::uint64_t combo =
      (static_cast<std::uint64_t>(identity_id) * kIdentityStride + offset) % kMaxIdentities;
  for (int p = 0; p < kParams; ++p) {
    id.level[p] = static_cast<int>(combo % kLevels);
    combo /= kLevels;
  }
  id.face_ax = kAxLevels[id.level[0]];
  id.face_ay = kAyLevels[id.level[1]];
  id.eye_spacing = kEyeLevels[id.level[2]];
  id.nose_length = kNoseLevels[id.level[3]];
  id.mouth_width = kMouthLevels[id.level[4]];
  for (int c = 0; c < 3; ++c) {
    id.skin[c] = kSkinLevels[id.level[5]][c];
    id.iris[c] = kIrisLevels[id.level[6]][c];
  }
  return id;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw InputError("unknown split tag: " + s);
}

Image render_face(const IdentitySpec& id, const AttributeVector& attrs,
                  const AttributeSchema& schema, int size) {
  if (size != 32 && size != 48 && size != 64) {
    throw InputError("render_face: size must be 32, 48 or 64");
  }
  if (attrs.size() != schema.size()) {
    throw InputError("render_face: attribute vector length does not match schema");
  }
  bool on[8] = {};
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (i >= schema.rules.size()) throw ConfigError("render_face: missing render rule");
    on[static_cast<int>(schema.rules[i])] = attrs[i] != 0;
  }
  auto active = [&on](RenderRule r) { return on[static_cast<int>(r)]; };

  const Layout L = layout_of(id);
  const double scale = size / 32.0;
  const double cx = id.face_cx;
  const double cy = id.face_cy;
  const double* hair = active(RenderRule::HairHue) ? kHairBlond : kHairDark;

  Rgb skin{{id.skin[0], id.skin[1], id.skin[2]}};
  if (active(RenderRule::SkinBright)) {
    static constexpr double white[3] = {1.0, 1.0, 1.0};
    skin = mix(skin, white, 0.35);
  }

  torch::Tensor out = torch::empty({3, size, size}, torch::kFloat32);
  auto acc = out.accessor<float, 3>();
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      // Geometry lives in 32-pixel units; sample the pixel centre.
      const double x = (px + 0.5) / scale;
      const double y = (py + 0.5) / scale;
      Rgb c{{kBackground[0], kBackground[1], kBackground[2]}};

      const bool face = in_ellipse(x, y, cx, cy, id.face_ax, id.face_ay);
      const bool cap = !face && y < cy - 0.2 * id.face_ay &&
                       in_ellipse(x, y, cx, cy - 1.0, id.face_ax + 1.5, id.face_ay + 2.0);
      if (cap) c = {{hair[0], hair[1], hair[2]}};

      if (face) {
        c = skin;
        // nose bridge, one pixel wide
        if (std::abs(x - cx) < 0.6 && y > L.eye_y + 1.2 && y < L.eye_y + 1.2 + id.nose_length) {
          c = {{skin.c[0] * 0.72, skin.c[1] * 0.72, skin.c[2] * 0.72}};
        }
        // eyebrows
        for (int side : {-1, 1}) {
          const double ex = cx + side * id.eye_spacing;
          if (std::abs(x - ex) < 1.6 && std::abs(y - L.brow_y) < 0.55) {
            c = {{0.18, 0.12, 0.08}};
          }
        }
        // eyes: white sclera + iris
        for (int side : {-1, 1}) {
          const double ex = cx + side * id.eye_spacing;
          if (in_ellipse(x, y, ex, L.eye_y, 1.6, 1.0)) c = {{0.95, 0.95, 0.95}};
          if (in_disc(x, y, ex, L.eye_y, 0.8)) c = {{id.iris[0], id.iris[1], id.iris[2]}};
        }
        // beard: jaw stipple below the mouth line
        if (active(RenderRule::JawTexture) && y > L.mouth_y - 1.0) {
          c = ((px + py) % 2 == 0) ? Rgb{{0.20, 0.14, 0.09}}
                                   : Rgb{{skin.c[0] * 0.6, skin.c[1] * 0.6, skin.c[2] * 0.6}};
        }
        // mouth: flat line, or U-shaped curve when smiling
        const double dx = x - cx;
        if (std::abs(dx) <= id.mouth_width) {
          double line_y = L.mouth_y;
          if (active(RenderRule::MouthCurve)) {
            const double t = dx / id.mouth_width;
            line_y = L.mouth_y + 1.8 * (1.0 - t * t) - 0.9;
          }
          if (std::abs(y - line_y) < 0.6) c = {{0.62, 0.16, 0.18}};
        }
        // blush
        if (active(RenderRule::CheekDots)) {
          static constexpr double pink[3] = {0.97, 0.40, 0.48};
          for (int side : {-1, 1}) {
            if (in_disc(x, y, cx + side * (id.eye_spacing + 1.2), cy + 0.12 * id.face_ay, 1.7)) {
              c = mix(c, pink, 0.65);
            }
          }
        }
        // bangs: bar across the top of the face
        if (active(RenderRule::TopBar) && y < L.face_top + 4.0) c = {{hair[0], hair[1], hair[2]}};
      }

      // glasses: translucent dark band across the eye rows
      if (active(RenderRule::EyeBand) && std::abs(y - L.eye_y) <= 2.0 &&
          std::abs(x - cx) <= id.eye_spacing + 2.8) {
        static constexpr double lens[3] = {0.06, 0.06, 0.09};
        c = mix(c, lens, 0.7);
      }
      // earrings: gold dots at the sides of the face
      if (active(RenderRule::SideDots)) {
        for (int side : {-1, 1}) {
          if (in_disc(x, y, cx + side * (id.face_ax + 0.4), cy + 0.15 * id.face_ay, 1.1)) {
            c = {{0.98, 0.82, 0.15}};
          }
        }
      }

      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(c.c[ch], 0.0, 1.0);
        acc[ch][py][px] = static_cast<float>(std::round(v * 255.0)) / 255.0f;
      }
    }
  }
  return out;
}

std::vector<DatasetRecord> generate_dataset(const DatasetConfig& cfg,
                                            const AttributeSchema& schema) {
  schema.validate();
  if (cfg.n_identities < 2) throw InputError("generate_dataset: need at least 2 identities");
  if (cfg.images_per_identity < 1) throw InputError("generate_dataset: need at least 1 image");
  const int first_test = std::min(
      cfg.n_identities - 1,
      static_cast<int>(std::floor(cfg.n_identities * (1.0 - cfg.test_fraction))));

  std::vector<DatasetRecord> records;
  records.reserve(static_cast<std::size_t>(cfg.n_identities) * cfg.images_per_identity);
  for (int ident = 0; ident < cfg.n_identities; ++ident) {
    const IdentitySpec spec = IdentitySpec::from_id(ident, cfg.seed);
    for (int j = 0; j < cfg.images_per_identity; ++j) {
      std::uint64_t state = splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(ident) *
                                                                 1000003ULL + j));
      DatasetRecord rec;
      rec.identity_id = ident;
      rec.attributes.resize(schema.size());
      for (auto& bit : rec.attributes) {
        state = splitmix64(state);
        bit = static_cast<int>(state >> 63);
      }
      rec.image = render_face(spec, rec.attributes, schema, cfg.image_size);
      if (ident >= first_test) {
        rec.split = Split::Test;
      } else if (cfg.val_every > 0 && j % cfg.val_every == cfg.val_every - 1) {
        rec.split = Split::Val;
      } else {
        rec.split = Split::Train;
      }
      records.push_back(std::move(rec));
    }
  }
  return records;
}

void save_dataset(const std::filesystem::path& root, std::vector<DatasetRecord>& records,
                  const AttributeSchema& schema, const std::string& provenance) {
  std::filesystem::create_directories(root / "images");
  std::ofstream manifest(root / "manifest.txt", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + root.string());
  manifest << "# " << provenance << "\n";
  manifest << "# schema " << schema.hash();
  for (const auto& n : schema.names) manifest << ' ' << n;
  manifest << "\n# path identity_id";
  for (std::size_t i = 0; i < schema.size(); ++i) manifest << " a" << i;
  manifest << " split\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& rec = records[i];
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
    rec.image_path = name.str();
    write_png(root / rec.image_path, rec.image);
    manifest << rec.image_path << ' ' << rec.identity_id;
    for (int b : rec.attributes) manifest << ' ' << b;
    manifest << ' ' << to_string(rec.split) << '\n';
  }
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& root,
                                        const AttributeSchema& schema) {
  std::ifstream manifest(root / "manifest.txt");
  if (!manifest) throw std::runtime_error("missing manifest in " + root.string());
  std::vector<DatasetRecord> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line);
      std::string hashmark, key, hash;
      hs >> hashmark >> key;
      if (key == "schema" && hs >> hash && hash != schema.hash()) {
        throw ConfigError("dataset schema hash mismatch: " + hash + " vs " + schema.hash());
      }
      continue;
    }
    std::istringstream is(line);
    DatasetRecord rec;
    std::string split;
    is >> rec.image_path >> rec.identity_id;
    rec.attributes.resize(schema.size());
    for (auto& b : rec.attributes) is >> b;
    is >> split;
    if (!is) throw std::runtime_error("malformed manifest line: " + line);
    rec.split = split_from_string(split);
    rec.image = read_png(root / rec.image_path);
    out.push_back(std::move(rec));
  }
  return out;
}

torch::Tensor stack_images(const std::vector<DatasetRecord>& records,
                           const std::vector<std::size_t>& indices) {
  std::vector<torch::Tensor> imgs;
  imgs.reserve(indices.size());
  for (auto i : indices) imgs.push_back(records.at(i).image);
  return torch::stack(imgs);
}

torch::Tensor stack_attributes(const std::vector<DatasetRecord>& records,
                               const std::vector<std::size_t>& indices) {
  std::vector<torch::Tensor> rows;
  rows.reserve(indices.size());
  for (auto i : indices) rows.push_back(attributes_to_tensor(records.at(i).attributes));
  return torch::stack(rows);
}

std::vector<std::size_t> indices_of(const std::vector<DatasetRecord>& records, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) out.push_back(i);
  }
  return out;
}

torch::Tensor attributes_to_tensor(const AttributeVector& attrs) {
  torch::Tensor t = torch::empty({static_cast<long>(attrs.size())}, torch::kFloat32);
  for (std::size_t i = 0; i < attrs.size(); ++i) t[static_cast<long>(i)] = attrs[i] ? 1.0f : 0.0f;
  return t;
}

AttributeVector flip(AttributeVector attrs, int index) {
  if (index < 0 || index >= static_cast<int>(attrs.size())) {
    throw InputError("flip: attribute index out of range");
  }
  attrs[static_cast<std::size_t>(index)] ^= 1;
  return attrs;
}

}  // namespace semattack
