#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cqs/aggregator.hpp"
#include "cqs/paradigms.hpp"
#include "cqs/synth.hpp"

namespace cqs {

// --- descriptor files -------------------------------------------------------
// Binary, little-endian: magic "CQSA", version u32, descriptor dim u32,
// count u64, then count x dim float32 values. Image ids go to a "<path>.ids"
// sidecar, one id per line, same order.
inline constexpr std::uint32_t kDescriptorFileVersion = 1;

void write_descriptor_file(const std::string& path, const std::vector<Descriptor>& descriptors);
std::vector<Descriptor> read_descriptor_file(const std::string& path);

// --- feature files ------------------------------------------------------------
// Binary, little-endian: magic "CQSF", version u32, rows u32, cols u32, then
// row-major float32 values. The manifest loader hook for externally produced
// patch features.
void write_feature_file(const std::string& path, const Matrix& features);
Matrix read_feature_file(const std::string& path);

// --- checkpoints -------------------------------------------------------------
// Binary, little-endian: magic "CQSP", version u32, JSON config echo
// (u32 length + bytes), then each tensor as u32 rows, u32 cols, float64 data.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const QaaParams& params, ParadigmKind paradigm);
struct Checkpoint {
  QaaParams params;
  ParadigmKind paradigm = ParadigmKind::CS;
};
Checkpoint load_checkpoint(const std::string& path);

// --- synthetic world ---------------------------------------------------------
void save_world_config(const std::string& path, const WorldConfig& config);
WorldConfig load_world_config(const std::string& path);

// --- observation manifests ---------------------------------------------------
// CSV with header: id,place_id,domain_id,x_m,y_m,frame_idx,feature_path
struct ManifestRow {
  std::string id;
  int place_id = -1;
  int domain_id = -1;
  double x_m = 0.0;
  double y_m = 0.0;
  long frame_idx = -1;
  std::string feature_path;  // empty -> rendered from the world
};
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::string& path);

// --- run manifest -------------------------------------------------------------
struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string version;
};
void write_run_manifest(const RunManifest& manifest);  // <output_dir>/run_manifest.json

std::string format_double(double v);  // deterministic CSV number formatting

extern const char* kVersionString;

}  // namespace cqs
