#include "csmcir/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

#include "csmcir/error.hpp"
#include "csmcir/mcot.hpp"

namespace csmcir::data {

using nlohmann::json;

namespace {

// Rng stream tags.
constexpr std::uint64_t kTagMaps = 1;
constexpr std::uint64_t kTagTrain = 2;
constexpr std::uint64_t kTagGallery = 3;
constexpr std::uint64_t kTagQueries = 4;
constexpr std::uint64_t kTagImageProjection = 5;
constexpr std::uint64_t kTagTextProjection = 6;

// The fixed generative structure shared by generation and the oracle.
struct LatentModel {
  Matrix image_map;    // d_raw x L
  Matrix manip_map;    // d_raw x L
  Matrix caption_map;  // d_raw x L
  std::vector<Vector> shifts;
  std::vector<Vector> train_pool;
  std::vector<Vector> gallery;
};

Vector gaussian_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

LatentModel build_model(const SyntheticConfig& cfg) {
  const Rng root(cfg.seed);
  Rng maps = root.fork(kTagMaps);
  LatentModel m;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
  m.image_map = random_normal(cfg.raw_dim, cfg.latent_dim, scale, maps);
  m.manip_map = random_normal(cfg.raw_dim, cfg.latent_dim, scale, maps);
  m.caption_map = random_normal(cfg.raw_dim, cfg.latent_dim, scale, maps);
  for (std::size_t a = 0; a < cfg.num_attributes; ++a) {
    Vector s = l2_normalize(gaussian_vector(cfg.latent_dim, maps));
    for (double& x : s) x *= cfg.shift_scale;
    m.shifts.push_back(std::move(s));
  }
  Rng train = root.fork(kTagTrain);
  for (std::size_t i = 0; i < cfg.train_pool; ++i) m.train_pool.push_back(gaussian_vector(cfg.latent_dim, train));
  Rng gallery = root.fork(kTagGallery);
  for (std::size_t i = 0; i < cfg.gallery_size; ++i) m.gallery.push_back(gaussian_vector(cfg.latent_dim, gallery));
  return m;
}

Vector observe(const Matrix& map, std::span<const double> latent, double noise, Rng* rng) {
  Vector out(map.rows(), 0.0);
  for (std::size_t r = 0; r < map.rows(); ++r) {
    out[r] = dot(map.row(r), latent);
    if (rng != nullptr && noise > 0.0) out[r] += noise * rng->normal();
  }
  return out;
}

Vector subtract(std::span<const double> a, std::span<const double> b) {
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

TripletSample make_triplet(std::string id, const LatentModel& m, const Vector& target_latent,
                           std::size_t target_index, std::size_t attribute, double noise,
                           bool noiseless_target, Rng& rng) {
  const Vector ref_latent = subtract(target_latent, m.shifts[attribute]);
  TripletSample s;
  s.id = std::move(id);
  s.target_index = target_index;
  s.ref_features = observe(m.image_map, ref_latent, noise, &rng);
  s.manip_features = observe(m.manip_map, m.shifts[attribute], noise, &rng);
  s.target_features = observe(m.image_map, target_latent, noise, noiseless_target ? nullptr : &rng);
  s.caption_features = observe(m.caption_map, target_latent, noise, noiseless_target ? nullptr : &rng);
  return s;
}

Vector least_squares(const Matrix& map, std::span<const double> y) {
  Eigen::MatrixXd a(map.rows(), map.cols());
  for (std::size_t r = 0; r < map.rows(); ++r)
    for (std::size_t c = 0; c < map.cols(); ++c) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = map(r, c);
  Eigen::VectorXd b(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) b(static_cast<Eigen::Index>(i)) = y[i];
  const Eigen::VectorXd x = a.colPivHouseholderQr().solve(b);
  return Vector(x.data(), x.data() + x.size());
}

Vector json_vector(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw SchemaError(std::string("missing field '") + key + "'", line);
  const auto& v = j.at(key);
  if (!v.is_array()) throw SchemaError(std::string("field '") + key + "' must be an array", line);
  Vector out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) throw SchemaError(std::string("field '") + key + "' must hold numbers", line);
    out.push_back(x.get<double>());
  }
  if (!all_finite(out)) throw SchemaError(std::string("field '") + key + "' is not finite", line);
  return out;
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError(std::string("malformed JSON: ") + e.what(), number);
    }
    if (!j.is_object()) throw SchemaError("record must be a JSON object", number);
    fn(j, number);
  }
}

}  // namespace

void SyntheticConfig::validate() const {
  if (latent_dim == 0 || raw_dim == 0 || feature_dim == 0) throw ContractError("SyntheticConfig: dims must be positive");
  if (latent_dim > raw_dim) throw ContractError("SyntheticConfig: latent_dim must not exceed raw_dim");
  if (num_attributes == 0) throw ContractError("SyntheticConfig: need at least one attribute");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ContractError("SyntheticConfig: noise must be >= 0");
  if (!(shift_scale > 0.0)) throw ContractError("SyntheticConfig: shift_scale must be positive");
  if (train_pool == 0 || gallery_size == 0) throw ContractError("SyntheticConfig: empty target pool or gallery");
  if (subset_size == 0 || subset_size > gallery_size) throw ContractError("SyntheticConfig: subset_size out of range");
}

json synthetic_config_to_json(const SyntheticConfig& c) {
  return json{{"latent_dim", c.latent_dim},       {"raw_dim", c.raw_dim},
              {"feature_dim", c.feature_dim},     {"num_attributes", c.num_attributes},
              {"num_samples", c.num_samples},     {"train_pool", c.train_pool},
              {"gallery_size", c.gallery_size},   {"num_queries", c.num_queries},
              {"subset_size", c.subset_size},     {"noise", c.noise},
              {"shift_scale", c.shift_scale},     {"seed", c.seed}};
}

SyntheticConfig synthetic_config_from_json(const json& j) {
  SyntheticConfig c;
  static const std::set<std::string> known = {
      "latent_dim", "raw_dim", "feature_dim", "num_attributes", "num_samples", "train_pool",
      "gallery_size", "num_queries", "subset_size", "noise", "shift_scale", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw SchemaError("unknown synthetic config key '" + k + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("latent_dim", c.latent_dim);
  get("raw_dim", c.raw_dim);
  get("feature_dim", c.feature_dim);
  get("num_attributes", c.num_attributes);
  get("num_samples", c.num_samples);
  get("train_pool", c.train_pool);
  get("gallery_size", c.gallery_size);
  get("num_queries", c.num_queries);
  get("subset_size", c.subset_size);
  get("noise", c.noise);
  get("shift_scale", c.shift_scale);
  get("seed", c.seed);
  return c;
}

// ---- frozen extractor ------------------------------------------------------

FrozenExtractor::FrozenExtractor(std::uint64_t seed, std::size_t raw_dim, std::size_t feature_dim)
    : seed_(seed) {
  if (raw_dim == 0 || feature_dim == 0) throw ContractError("FrozenExtractor: dims must be positive");
  Rng rng(seed);
  projection_ = random_normal(feature_dim, raw_dim, 1.0 / std::sqrt(static_cast<double>(raw_dim)), rng);
}

Vector FrozenExtractor::extract(std::span<const double> raw) const {
  if (raw.size() != projection_.cols()) {
    throw ContractError("frozen_extract: expected " + std::to_string(projection_.cols()) +
                        " raw features, got " + std::to_string(raw.size()));
  }
  Vector out(projection_.rows());
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = std::tanh(dot(projection_.row(r), raw));
  return l2_normalize(out);
}

Matrix FrozenExtractor::extract_rows(const std::vector<Vector>& raws) const {
  std::vector<Vector> rows;
  rows.reserve(raws.size());
  for (const auto& r : raws) rows.push_back(extract(r));
  return Matrix::from_rows(rows);
}

FrozenExtractor Dataset::image_extractor() const {
  return FrozenExtractor(image_projection_seed, raw_dim(), config.feature_dim);
}

FrozenExtractor Dataset::text_extractor() const {
  return FrozenExtractor(text_projection_seed, raw_dim(), config.feature_dim);
}

std::size_t Dataset::raw_dim() const {
  if (!train.empty()) return train.front().ref_features.size();
  if (!queries.empty()) return queries.front().ref_features.size();
  return config.raw_dim;
}

// ---- synthetic generation ----------------------------------------------------

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const LatentModel m = build_model(cfg);
  const Rng root(cfg.seed);

  Dataset ds;
  ds.config = cfg;
  ds.synthetic = true;
  ds.image_projection_seed = root.fork(kTagImageProjection).next_u64();
  ds.text_projection_seed = root.fork(kTagTextProjection).next_u64();

  Rng train = root.fork(kTagTrain).fork(1);
  for (std::size_t n = 0; n < cfg.num_samples; ++n) {
    const std::size_t t = static_cast<std::size_t>(train.below(cfg.train_pool));
    const std::size_t a = static_cast<std::size_t>(train.below(cfg.num_attributes));
    ds.train.push_back(make_triplet("train-" + std::to_string(n), m, m.train_pool[t], t, a,
                                    cfg.noise, false, train));
  }

  for (std::size_t g = 0; g < cfg.gallery_size; ++g) {
    ds.gallery.push_back(GalleryItem{"gallery-" + std::to_string(g),
                                     observe(m.image_map, m.gallery[g], 0.0, nullptr),
                                     observe(m.caption_map, m.gallery[g], 0.0, nullptr)});
  }

  Rng queries = root.fork(kTagQueries);
  for (std::size_t n = 0; n < cfg.num_queries; ++n) {
    const std::size_t t = static_cast<std::size_t>(queries.below(cfg.gallery_size));
    const std::size_t a = static_cast<std::size_t>(queries.below(cfg.num_attributes));
    ds.queries.push_back(make_triplet("query-" + std::to_string(n), m, m.gallery[t], t, a,
                                      cfg.noise, true, queries));
    // Hard subset: the target plus its nearest gallery neighbours in latent space.
    std::vector<std::size_t> idx(cfg.gallery_size);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
      return squared_distance(m.gallery[x], m.gallery[t]) < squared_distance(m.gallery[y], m.gallery[t]);
    });
    idx.resize(cfg.subset_size);
    std::sort(idx.begin(), idx.end());
    ds.subsets.push_back(std::move(idx));
  }

  const FrozenExtractor image = ds.image_extractor();
  std::vector<Vector> gallery_raw;
  for (const auto& g : ds.gallery) gallery_raw.push_back(g.image_features);
  check_no_collisions(image.extract_rows(gallery_raw));

  ds.oracle_recall = oracle_latent_recall(cfg, ds, eval::kRecallKs);
  return ds;
}

eval::RecallMap oracle_latent_recall(const SyntheticConfig& cfg, const Dataset& ds,
                                     std::span<const int> ks) {
  const LatentModel m = build_model(cfg);
  if (ds.queries.empty()) return {};
  Matrix scores(ds.queries.size(), m.gallery.size());
  std::vector<std::size_t> truth;
  for (std::size_t q = 0; q < ds.queries.size(); ++q) {
    const auto& s = ds.queries[q];
    Vector estimate = least_squares(m.image_map, s.ref_features);
    const Vector shift_estimate = least_squares(m.manip_map, s.manip_features);
    std::size_t best = 0;
    for (std::size_t a = 1; a < m.shifts.size(); ++a) {
      if (squared_distance(shift_estimate, m.shifts[a]) < squared_distance(shift_estimate, m.shifts[best])) best = a;
    }
    axpy(1.0, m.shifts[best], estimate);
    for (std::size_t g = 0; g < m.gallery.size(); ++g) scores(q, g) = -squared_distance(estimate, m.gallery[g]);
    truth.push_back(s.target_index);
  }
  return eval::recall_at_k(eval::rank_scores(scores, truth), ks);
}

void check_no_collisions(const Matrix& embeddings, double tolerance) {
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    for (std::size_t j = i + 1; j < embeddings.rows(); ++j) {
      if (std::sqrt(squared_distance(embeddings.row(i), embeddings.row(j))) <= tolerance) {
        throw ContractError("frozen features collide for gallery items " + std::to_string(i) +
                            " and " + std::to_string(j));
      }
    }
  }
}

// ---- JSONL ------------------------------------------------------------------

std::vector<TripletSample> load_triplets_jsonl(const std::filesystem::path& path,
                                               std::vector<std::vector<std::size_t>>* subsets) {
  std::vector<TripletSample> out;
  if (subsets != nullptr) subsets->clear();
  for_each_line(path, [&](const json& j, std::size_t line) {
    TripletSample s;
    if (!j.contains("id")) throw SchemaError("missing field 'id'", line);
    s.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    s.ref_features = json_vector(j, "ref_features", line);
    s.manip_features = json_vector(j, "manip_features", line);
    s.target_features = json_vector(j, "target_features", line);
    if (j.contains("caption_features")) {
      s.caption_features = json_vector(j, "caption_features", line);
    } else if (j.contains("caption") && j.at("caption").is_string()) {
      try {
        s.caption_features = mcot::embed_caption(j.at("caption").get<std::string>(), s.ref_features.size());
      } catch (const DomainError& e) {
        throw SchemaError(std::string("caption: ") + e.what(), line);
      }
    } else {
      throw SchemaError("missing field 'caption_features' (or 'caption')", line);
    }
    if (!j.contains("target_index") || !j.at("target_index").is_number_unsigned()) {
      throw SchemaError("missing or invalid field 'target_index'", line);
    }
    s.target_index = j.at("target_index").get<std::size_t>();
    const std::size_t d = s.ref_features.size();
    if (d == 0 || s.manip_features.size() != d || s.target_features.size() != d ||
        s.caption_features.size() != d) {
      throw SchemaError("feature arrays must be nonempty and of equal length", line);
    }
    if (!out.empty() && d != out.front().ref_features.size()) {
      throw SchemaError("feature width differs from earlier records", line);
    }
    if (subsets != nullptr) {
      std::vector<std::size_t> sub;
      if (j.contains("subset")) sub = j.at("subset").get<std::vector<std::size_t>>();
      subsets->push_back(std::move(sub));
    }
    out.push_back(std::move(s));
  });
  return out;
}

void write_triplets_jsonl(const std::filesystem::path& path, const std::vector<TripletSample>& samples,
                          const std::vector<std::vector<std::size_t>>* subsets) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["ref_features"] = s.ref_features;
    j["manip_features"] = s.manip_features;
    j["target_features"] = s.target_features;
    j["caption_features"] = s.caption_features;
    j["target_index"] = s.target_index;
    if (subsets != nullptr && i < subsets->size() && !(*subsets)[i].empty()) j["subset"] = (*subsets)[i];
    out << j.dump() << '\n';
  }
}

std::vector<GalleryItem> load_gallery_jsonl(const std::filesystem::path& path) {
  std::vector<GalleryItem> out;
  for_each_line(path, [&](const json& j, std::size_t line) {
    GalleryItem g;
    if (!j.contains("id")) throw SchemaError("missing field 'id'", line);
    g.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    g.image_features = json_vector(j, "image_features", line);
    g.caption_features = json_vector(j, "caption_features", line);
    if (g.image_features.empty() || g.image_features.size() != g.caption_features.size()) {
      throw SchemaError("feature arrays must be nonempty and of equal length", line);
    }
    out.push_back(std::move(g));
  });
  return out;
}

void write_gallery_jsonl(const std::filesystem::path& path, const std::vector<GalleryItem>& items) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& g : items) {
    nlohmann::ordered_json j;
    j["id"] = g.id;
    j["image_features"] = g.image_features;
    j["caption_features"] = g.caption_features;
    out << j.dump() << '\n';
  }
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  write_triplets_jsonl(dir / "train.jsonl", ds.train);
  write_triplets_jsonl(dir / "queries.jsonl", ds.queries, &ds.subsets);
  write_gallery_jsonl(dir / "gallery.jsonl", ds.gallery);
  json side;
  side["synthetic"] = ds.synthetic;
  side["config"] = synthetic_config_to_json(ds.config);
  side["image_projection_seed"] = ds.image_projection_seed;
  side["text_projection_seed"] = ds.text_projection_seed;
  json oracle = json::object();
  for (const auto& [k, v] : ds.oracle_recall) oracle[std::to_string(k)] = v;
  side["oracle_recall"] = oracle;
  std::ofstream out(dir / "dataset.json", std::ios::binary | std::ios::trunc);
  out << side.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  const auto side_path = dir / "dataset.json";
  if (std::filesystem::exists(side_path)) {
    std::ifstream in(side_path, std::ios::binary);
    json side;
    try {
      side = json::parse(in);
    } catch (const json::parse_error& e) {
      throw SchemaError(std::string("dataset.json: ") + e.what());
    }
    ds.synthetic = side.value("synthetic", false);
    if (side.contains("config")) ds.config = synthetic_config_from_json(side.at("config"));
    ds.image_projection_seed = side.value("image_projection_seed", std::uint64_t{0});
    ds.text_projection_seed = side.value("text_projection_seed", std::uint64_t{0});
    if (side.contains("oracle_recall")) {
      for (const auto& [k, v] : side.at("oracle_recall").items()) ds.oracle_recall[std::stoi(k)] = v.get<double>();
    }
  }
  if (std::filesystem::exists(dir / "train.jsonl")) ds.train = load_triplets_jsonl(dir / "train.jsonl");
  if (std::filesystem::exists(dir / "queries.jsonl")) {
    ds.queries = load_triplets_jsonl(dir / "queries.jsonl", &ds.subsets);
    if (std::all_of(ds.subsets.begin(), ds.subsets.end(), [](const auto& s) { return s.empty(); })) ds.subsets.clear();
  }
  if (std::filesystem::exists(dir / "gallery.jsonl")) ds.gallery = load_gallery_jsonl(dir / "gallery.jsonl");
  for (const auto& q : ds.queries) {
    if (q.target_index >= ds.gallery.size()) throw SchemaError("query " + q.id + ": target_index outside gallery");
  }
  if (ds.train.empty() && ds.queries.empty()) throw SchemaError("dataset " + dir.string() + " holds no triplets");
  ds.config.raw_dim = ds.raw_dim();
  return ds;
}

}  // namespace csmcir::data
