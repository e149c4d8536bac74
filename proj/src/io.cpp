#include "cqs/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cqs {

using nlohmann::json;

const char* kVersionString = "cqs-0.1.0";

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  write_u32(out, static_cast<std::uint32_t>(v));
  write_u32(out, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t read_u64(std::istream& in) {
  const std::uint64_t lo = read_u32(in);
  const std::uint64_t hi = read_u32(in);
  return lo | (hi << 32);
}

void write_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(out, bits);
}

float read_f32(std::istream& in) {
  const std::uint32_t bits = read_u32(in);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

double read_f64(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  write_u32(out, static_cast<std::uint32_t>(m.rows()));
  write_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (std::size_t i = 0; i < m.size(); ++i) write_f64(out, m.data()[i]);
}

Matrix read_matrix(std::istream& in) {
  const std::uint32_t rows = read_u32(in);
  const std::uint32_t cols = read_u32(in);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = read_f64(in);
  return m;
}

void write_vec(std::ostream& out, const std::vector<double>& v) {
  write_u32(out, static_cast<std::uint32_t>(v.size()));
  write_u32(out, 1);
  for (double x : v) write_f64(out, x);
}

std::vector<double> read_vec(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  const std::uint32_t one = read_u32(in);
  if (one != 1) throw std::runtime_error("checkpoint: malformed vector");
  std::vector<double> v(n);
  for (double& x : v) x = read_f64(in);
  return v;
}

void write_mha(std::ostream& out, const MhaParams& p) {
  write_matrix(out, p.w_q);
  write_matrix(out, p.w_k);
  write_matrix(out, p.w_v);
  write_matrix(out, p.w_o);
  write_vec(out, p.b_q);
  write_vec(out, p.b_k);
  write_vec(out, p.b_v);
  write_vec(out, p.b_o);
  write_u32(out, static_cast<std::uint32_t>(p.heads));
}

MhaParams read_mha(std::istream& in) {
  MhaParams p;
  p.w_q = read_matrix(in);
  p.w_k = read_matrix(in);
  p.w_v = read_matrix(in);
  p.w_o = read_matrix(in);
  p.b_q = read_vec(in);
  p.b_k = read_vec(in);
  p.b_v = read_vec(in);
  p.b_o = read_vec(in);
  p.heads = read_u32(in);
  return p;
}

void expect_magic(std::istream& in, const char* magic, const std::string& what) {
  char buf[4];
  in.read(buf, 4);
  if (!in || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(what + ": bad magic, not a " + magic + " file");
  }
}

}  // namespace

void write_descriptor_file(const std::string& path, const std::vector<Descriptor>& descriptors) {
  if (descriptors.empty()) throw std::invalid_argument("write_descriptor_file: no descriptors");
  const std::size_t dim = descriptors[0].values.size();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write("CQSA", 4);
  write_u32(out, kDescriptorFileVersion);
  write_u32(out, static_cast<std::uint32_t>(dim));
  write_u64(out, descriptors.size());
  for (const Descriptor& d : descriptors) {
    if (d.values.size() != dim) {
      throw std::invalid_argument("write_descriptor_file: inconsistent dims " +
                                  std::to_string(d.values.size()) + " vs " +
                                  std::to_string(dim));
    }
    for (double v : d.values) write_f32(out, static_cast<float>(v));
  }
  out.close();

  std::ofstream ids(path + ".ids");
  if (!ids) throw std::runtime_error("cannot open " + path + ".ids for writing");
  for (const Descriptor& d : descriptors) ids << d.image_id << '\n';
}

std::vector<Descriptor> read_descriptor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  expect_magic(in, "CQSA", "descriptor file");
  const std::uint32_t version = read_u32(in);
  if (version != kDescriptorFileVersion) {
    throw std::runtime_error("descriptor file " + path + ": version " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kDescriptorFileVersion));
  }
  const std::uint32_t dim = read_u32(in);
  const std::uint64_t count = read_u64(in);

  std::vector<std::string> ids;
  {
    std::ifstream idf(path + ".ids");
    if (!idf) throw std::runtime_error("cannot open id sidecar " + path + ".ids");
    std::string line;
    while (std::getline(idf, line)) ids.push_back(line);
  }
  if (ids.size() != count) {
    throw std::runtime_error("descriptor file " + path + ": " + std::to_string(count) +
                             " records but " + std::to_string(ids.size()) + " ids");
  }

  std::vector<Descriptor> descriptors(count);
  for (std::uint64_t r = 0; r < count; ++r) {
    descriptors[r].image_id = ids[r];
    descriptors[r].values.resize(dim);
    for (std::uint32_t j = 0; j < dim; ++j) descriptors[r].values[j] = read_f32(in);
  }
  return descriptors;
}

void write_feature_file(const std::string& path, const Matrix& features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write("CQSF", 4);
  write_u32(out, 1);
  write_u32(out, static_cast<std::uint32_t>(features.rows()));
  write_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (std::size_t i = 0; i < features.size(); ++i)
    write_f32(out, static_cast<float>(features.data()[i]));
}

Matrix read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open feature file " + path);
  expect_magic(in, "CQSF", "feature file");
  const std::uint32_t version = read_u32(in);
  if (version != 1) {
    throw std::runtime_error("feature file " + path + ": version " + std::to_string(version) +
                             ", expected 1");
  }
  const std::uint32_t rows = read_u32(in);
  const std::uint32_t cols = read_u32(in);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = read_f32(in);
  return m;
}

void save_checkpoint(const std::string& path, const QaaParams& params, ParadigmKind paradigm) {
  params.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write("CQSP", 4);
  write_u32(out, kCheckpointVersion);

  json echo;
  echo["n_q"] = params.config.n_q;
  echo["c_o"] = params.config.c_o;
  echo["c_f"] = params.config.c_f;
  echo["c_r"] = params.config.c_r;
  echo["heads"] = params.config.heads;
  echo["paradigm"] = to_string(paradigm);
  const std::string blob = echo.dump();
  write_u32(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));

  write_matrix(out, params.q_f);
  write_matrix(out, params.q_r);
  write_mha(out, params.feat_self_attn);
  write_mha(out, params.feat_pred_attn);
  write_matrix(out, params.proj_w);
  write_vec(out, params.proj_b);
  write_mha(out, params.ref_self_attn);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  expect_magic(in, "CQSP", "checkpoint");
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path + ": version " + std::to_string(version) +
                             ", expected " + std::to_string(kCheckpointVersion));
  }
  const std::uint32_t blob_len = read_u32(in);
  std::string blob(blob_len, '\0');
  in.read(blob.data(), blob_len);
  if (!in) throw std::runtime_error("checkpoint " + path + ": truncated config echo");
  const json echo = json::parse(blob);

  Checkpoint ck;
  ck.paradigm = paradigm_from_string(echo.at("paradigm").get<std::string>());
  ck.params.config.n_q = echo.at("n_q").get<std::size_t>();
  ck.params.config.c_o = echo.at("c_o").get<std::size_t>();
  ck.params.config.c_f = echo.at("c_f").get<std::size_t>();
  ck.params.config.c_r = echo.at("c_r").get<std::size_t>();
  ck.params.config.heads = echo.at("heads").get<std::size_t>();

  ck.params.q_f = read_matrix(in);
  ck.params.q_r = read_matrix(in);
  ck.params.feat_self_attn = read_mha(in);
  ck.params.feat_pred_attn = read_mha(in);
  ck.params.proj_w = read_matrix(in);
  ck.params.proj_b = read_vec(in);
  ck.params.ref_self_attn = read_mha(in);
  ck.params.validate();
  return ck;
}

void save_world_config(const std::string& path, const WorldConfig& config) {
  json j;
  j["seed"] = config.seed;
  j["num_places"] = config.num_places;
  j["c_o"] = config.c_o;
  j["grid"] = config.grid;
  j["area_m"] = config.area_m;
  j["min_separation_m"] = config.min_separation_m;
  j["num_distractors"] = config.num_distractors;
  j["place_weight"] = config.place_weight;
  j["blob_width"] = config.blob_width;
  j["blob_shift"] = config.blob_shift;
  j["clutter_weight"] = config.clutter_weight;
  j["landmark_weight"] = config.landmark_weight;
  j["feature_scale"] = config.feature_scale;
  j["position_jitter_m"] = config.position_jitter_m;
  j["domains"] = json::array();
  for (const DomainConfig& d : config.domains) {
    j["domains"].push_back({{"viewpoint_spread", d.viewpoint_spread},
                            {"appearance_angle", d.appearance_angle},
                            {"appearance_bias", d.appearance_bias},
                            {"noise_sigma", d.noise_sigma},
                            {"sampling_density", d.sampling_density}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

WorldConfig load_world_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open world config " + path);
  json j;
  in >> j;
  WorldConfig config;
  config.seed = j.at("seed").get<std::uint64_t>();
  config.num_places = j.at("num_places").get<std::size_t>();
  config.c_o = j.at("c_o").get<std::size_t>();
  config.grid = j.at("grid").get<std::size_t>();
  config.area_m = j.value("area_m", config.area_m);
  config.min_separation_m = j.value("min_separation_m", config.min_separation_m);
  config.num_distractors = j.value("num_distractors", config.num_distractors);
  config.place_weight = j.value("place_weight", config.place_weight);
  config.blob_width = j.value("blob_width", config.blob_width);
  config.blob_shift = j.value("blob_shift", config.blob_shift);
  config.clutter_weight = j.value("clutter_weight", config.clutter_weight);
  config.landmark_weight = j.value("landmark_weight", config.landmark_weight);
  config.feature_scale = j.value("feature_scale", config.feature_scale);
  config.position_jitter_m = j.value("position_jitter_m", config.position_jitter_m);
  for (const auto& d : j.at("domains")) {
    DomainConfig dc;
    dc.viewpoint_spread = d.value("viewpoint_spread", dc.viewpoint_spread);
    dc.appearance_angle = d.value("appearance_angle", dc.appearance_angle);
    dc.appearance_bias = d.value("appearance_bias", dc.appearance_bias);
    dc.noise_sigma = d.value("noise_sigma", dc.noise_sigma);
    dc.sampling_density = d.value("sampling_density", dc.sampling_density);
    config.domains.push_back(dc);
  }
  return config;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "id,place_id,domain_id,x_m,y_m,frame_idx,feature_path\n";
  for (const ManifestRow& r : rows) {
    out << r.id << ',' << r.place_id << ',' << r.domain_id << ',' << format_double(r.x_m) << ','
        << format_double(r.y_m) << ',' << r.frame_idx << ',' << r.feature_path << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("manifest " + path + " is empty");
  if (line.rfind("id,place_id,domain_id", 0) != 0) {
    throw std::runtime_error("manifest " + path + ": unexpected header '" + line + "'");
  }
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    ManifestRow r;
    std::getline(ss, r.id, ',');
    std::getline(ss, field, ',');
    r.place_id = std::stoi(field);
    std::getline(ss, field, ',');
    r.domain_id = std::stoi(field);
    std::getline(ss, field, ',');
    r.x_m = std::stod(field);
    std::getline(ss, field, ',');
    r.y_m = std::stod(field);
    std::getline(ss, field, ',');
    r.frame_idx = std::stol(field);
    std::getline(ss, r.feature_path, ',');
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_run_manifest(const RunManifest& manifest) {
  namespace fs = std::filesystem;
  fs::create_directories(manifest.output_dir);
  json j;
  j["command"] = manifest.command;
  j["config_path"] = manifest.config_path;
  j["seed"] = manifest.seed;
  j["output_dir"] = manifest.output_dir;
  j["version"] = manifest.version;
  std::ofstream out(fs::path(manifest.output_dir) / "run_manifest.json");
  if (!out) throw std::runtime_error("cannot write run manifest in " + manifest.output_dir);
  out << j.dump(2) << '\n';
}

}  // namespace cqs
