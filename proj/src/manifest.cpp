#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "binary.hpp"
#include "rns/io.hpp"

namespace rns {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Shape of an RNSF file from its header alone.
std::vector<std::uint64_t> peek_tensor_shape(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + path.string());
  std::vector<std::uint8_t> head(7);
  in.read(reinterpret_cast<char*>(head.data()), 7);
  if (in.gcount() != 7) throw Error(ErrorKind::TruncatedFile, path.string() + ": header too short");
  if (std::string(head.begin(), head.begin() + 4) != "RNSF")
    throw Error(ErrorKind::FormatError, path.string() + ": bad magic");
  std::vector<std::uint8_t> dims(std::size_t(head[6]) * 8);
  in.read(reinterpret_cast<char*>(dims.data()), static_cast<std::streamsize>(dims.size()));
  if (static_cast<std::size_t>(in.gcount()) != dims.size())
    throw Error(ErrorKind::TruncatedFile, path.string() + ": header too short");
  detail::ByteReader r(dims);
  std::vector<std::uint64_t> shape(head[6]);
  for (auto& s : shape) s = r.u64();
  return shape;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

fs::path existing(const fs::path& p) {
  if (!fs::exists(p)) throw Error(ErrorKind::MissingFile, p.string() + " does not exist");
  return p;
}

std::string relative_to(const fs::path& p, const fs::path& base) {
  const fs::path rel = p.lexically_relative(base);
  return rel.empty() ? p.generic_string() : rel.generic_string();
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorKind::ParseError, std::string("manifest entry lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("manifest field '") + key + "': " + e.what());
  }
}

std::optional<std::string> optional_string(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return field<std::string>(j, key);
}

}  // namespace

const ManifestQueryImage& Manifest::query(const std::string& key) const {
  for (const auto& q : query_images)
    if (q.id == key) return q;
  try {
    std::size_t pos = 0;
    const unsigned long idx = std::stoul(key, &pos);
    if (pos == key.size() && idx < query_images.size()) return query_images[idx];
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::InvalidArgument, "no query image '" + key + "' in manifest");
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::ParseError, path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::ParseError, "manifest root must be an object");
  const fs::path base = path.parent_path();

  Manifest m;
  m.feature_dim = field<std::size_t>(j, "feature_dim");
  if (m.feature_dim == 0) throw Error(ErrorKind::ParseError, "feature_dim must be positive");
  if (j.contains("ignore_index")) m.ignore_index = field<std::uint16_t>(j, "ignore_index");

  for (const json& c : field<json>(j, "classes")) {
    ManifestClass mc;
    mc.id = field<std::uint32_t>(c, "id");
    mc.name = optional_string(c, "name");
    if (auto ref = optional_string(c, "text_feature_ref")) mc.text_feature_ref = existing(resolve(base, *ref));
    m.classes.push_back(std::move(mc));
  }
  std::sort(m.classes.begin(), m.classes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < m.classes.size(); ++i)
    if (m.classes[i].id != i) throw Error(ErrorKind::ParseError, "class ids must be dense in [0, C)");
  if (m.classes.empty()) throw Error(ErrorKind::ParseError, "manifest declares no classes");

  const auto check_dim = [&](const fs::path& p, std::size_t rank) {
    const auto shape = peek_tensor_shape(p);
    if (shape.size() != rank)
      throw Error(ErrorKind::DimensionMismatch, p.string() + ": unexpected tensor rank " + std::to_string(shape.size()));
    if (shape.back() != m.feature_dim)
      throw Error(ErrorKind::DimensionMismatch, p.string() + ": feature dim " + std::to_string(shape.back()) +
                                                    " != manifest feature_dim " + std::to_string(m.feature_dim));
  };
  for (const auto& c : m.classes)
    if (c.text_feature_ref) {
      const auto shape = peek_tensor_shape(*c.text_feature_ref);
      if (shape.empty() || shape.back() != m.feature_dim || Tensor{shape, {}}.numel() != m.feature_dim)
        throw Error(ErrorKind::DimensionMismatch, c.text_feature_ref->string() + ": text feature is not [d]");
    }

  if (j.contains("support_images"))
    for (const json& s : j.at("support_images")) {
      ManifestSupportImage si;
      si.feature_file = existing(resolve(base, field<std::string>(s, "feature_file")));
      si.mask_file = existing(resolve(base, field<std::string>(s, "mask_file")));
      si.image_id = s.contains("image_id") ? field<std::string>(s, "image_id") : si.feature_file.generic_string();
      check_dim(si.feature_file, 3);
      m.support_images.push_back(std::move(si));
    }

  if (j.contains("query_images"))
    for (const json& q : j.at("query_images")) {
      ManifestQueryImage qi;
      qi.feature_file = existing(resolve(base, field<std::string>(q, "feature_file")));
      if (auto p = optional_string(q, "mask_file")) qi.mask_file = existing(resolve(base, *p));
      if (auto p = optional_string(q, "regions_file")) qi.regions_file = existing(resolve(base, *p));
      qi.image_h = field<std::size_t>(q, "image_h");
      qi.image_w = field<std::size_t>(q, "image_w");
      qi.id = q.contains("id") ? field<std::string>(q, "id") : std::to_string(m.query_images.size());
      check_dim(qi.feature_file, 3);
      m.query_images.push_back(std::move(qi));
    }
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  const fs::path base = path.parent_path();
  json j;
  j["feature_dim"] = m.feature_dim;
  j["ignore_index"] = m.ignore_index;
  j["classes"] = json::array();
  for (const auto& c : m.classes) {
    json jc{{"id", c.id}};
    if (c.name) jc["name"] = *c.name;
    if (c.text_feature_ref) jc["text_feature_ref"] = relative_to(*c.text_feature_ref, base);
    j["classes"].push_back(std::move(jc));
  }
  j["support_images"] = json::array();
  for (const auto& s : m.support_images)
    j["support_images"].push_back({{"feature_file", relative_to(s.feature_file, base)},
                                   {"mask_file", relative_to(s.mask_file, base)},
                                   {"image_id", s.image_id}});
  j["query_images"] = json::array();
  for (const auto& q : m.query_images) {
    json jq{{"id", q.id},
            {"feature_file", relative_to(q.feature_file, base)},
            {"image_h", q.image_h},
            {"image_w", q.image_w}};
    if (q.mask_file) jq["mask_file"] = relative_to(*q.mask_file, base);
    if (q.regions_file) jq["regions_file"] = relative_to(*q.regions_file, base);
    j["query_images"].push_back(std::move(jq));
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::MissingFile, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

TextBank load_text_bank(const Manifest& m) {
  const std::size_t C = m.num_classes();
  TextBank bank;
  bank.features = RowMatrixXd::Zero(C, m.feature_dim);
  bank.present.assign(C, false);
  bank.class_names.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    bank.class_names[c] = m.classes[c].name;
    if (!m.classes[c].text_feature_ref) continue;
    const Tensor t = read_tensor(*m.classes[c].text_feature_ref);
    if (t.values.size() != m.feature_dim)
      throw Error(ErrorKind::DimensionMismatch, m.classes[c].text_feature_ref->string() + ": wrong text feature size");
    const Eigen::Map<const Eigen::VectorXf> v(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
    bank.features.row(c) = l2_normalized(v.cast<double>()).transpose();
    bank.present[c] = true;
  }
  return bank;
}

}  // namespace rns
