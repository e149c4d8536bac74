#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cqs/coding_rate.hpp"
#include "cqs/io.hpp"
#include "cqs/log.hpp"
#include "cqs/retrieval.hpp"
#include "cqs/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cqs;

namespace {

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  json j;
  in >> j;
  return j;
}

SyntheticWorld load_world(const std::string& path) {
  return generate_world(load_world_config(path));
}

// Varied default domain profiles: one near-front-view, the rest multi-view
// with increasingly strong appearance shifts.
std::vector<DomainConfig> default_domains(std::size_t n) {
  std::vector<DomainConfig> domains;
  for (std::size_t d = 0; d < n; ++d) {
    DomainConfig dc;
    dc.viewpoint_spread = d == 0 ? 0.05 : 0.3 + 0.1 * static_cast<double>(d);
    dc.appearance_angle = 0.7 + 0.2 * static_cast<double>(d);
    dc.appearance_bias = 0.6 + 0.2 * static_cast<double>(d);
    dc.noise_sigma = 0.05;
    dc.sampling_density = 1.0;
    domains.push_back(dc);
  }
  return domains;
}

TrainConfig parse_train_config(const json& j) {
  TrainConfig cfg;
  if (j.contains("plan")) {
    const auto& p = j.at("plan");
    cfg.plan.n = p.value("n", cfg.plan.n);
    cfg.plan.k = p.value("k", cfg.plan.k);
    cfg.plan.m = p.value("m", cfg.plan.m);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    cfg.model.n_q = m.value("n_q", cfg.model.n_q);
    cfg.model.c_o = m.value("c_o", cfg.model.c_o);
    cfg.model.c_f = m.value("c_f", cfg.model.c_f);
    cfg.model.c_r = m.value("c_r", cfg.model.c_r);
    cfg.model.heads = m.value("heads", cfg.model.heads);
  }
  if (j.contains("paradigm")) cfg.paradigm = paradigm_from_string(j.at("paradigm").get<std::string>());
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
    cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
    cfg.optimizer.warmup_iters = o.value("warmup_iters", cfg.optimizer.warmup_iters);
    cfg.optimizer.max_epochs = o.value("max_epochs", cfg.optimizer.max_epochs);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    cfg.loss.alpha = l.value("alpha", cfg.loss.alpha);
    cfg.loss.beta = l.value("beta", cfg.loss.beta);
    cfg.loss.lambda = l.value("lambda", cfg.loss.lambda);
    cfg.loss.gamma = l.value("gamma", cfg.loss.gamma);
  }
  if (j.contains("sinkhorn")) {
    const auto& s = j.at("sinkhorn");
    cfg.sinkhorn.max_iters = s.value("max_iters", cfg.sinkhorn.max_iters);
    cfg.sinkhorn.tol = s.value("tol", cfg.sinkhorn.tol);
    cfg.sinkhorn.temperature = s.value("temperature", cfg.sinkhorn.temperature);
  }
  cfg.steps_per_epoch = j.value("steps_per_epoch", cfg.steps_per_epoch);
  cfg.early_stop_patience = j.value("early_stop_patience", cfg.early_stop_patience);
  cfg.observations_per_place = j.value("observations_per_place", cfg.observations_per_place);
  cfg.val_db_per_place = j.value("val_db_per_place", cfg.val_db_per_place);
  cfg.val_queries_per_place = j.value("val_queries_per_place", cfg.val_queries_per_place);
  return cfg;
}

std::vector<DatasetDef> select_datasets(const SyntheticWorld& world, const TrainConfig& cfg,
                                        const std::vector<int>& train_domains) {
  std::vector<DatasetDef> all = make_datasets(world, cfg.observations_per_place);
  if (train_domains.empty()) return all;
  std::vector<DatasetDef> selected;
  for (int d : train_domains) {
    if (d < 0 || static_cast<std::size_t>(d) >= all.size()) {
      throw std::runtime_error("train_domains: domain " + std::to_string(d) +
                               " out of range [0, " + std::to_string(all.size()) + ")");
    }
    selected.push_back(all[static_cast<std::size_t>(d)]);
  }
  return selected;
}

FeatureMap features_for_row(const SyntheticWorld& world, const ManifestRow& row,
                            const std::string& manifest_dir) {
  if (!row.feature_path.empty()) {
    fs::path p(row.feature_path);
    if (p.is_relative()) p = fs::path(manifest_dir) / p;
    FeatureMap fm;
    fm.patches = read_feature_file(p.string());
    fm.image_id = row.id;
    return fm;
  }
  PlaceObservation obs = make_observation(world, static_cast<std::size_t>(row.place_id),
                                          static_cast<std::size_t>(row.domain_id),
                                          static_cast<std::uint64_t>(row.frame_idx));
  obs.features.image_id = row.id;
  return std::move(obs.features);
}

std::vector<Descriptor> encode_manifest(const SyntheticWorld& world,
                                        const std::vector<ManifestRow>& rows,
                                        const std::string& manifest_dir, const QaaParams& params,
                                        ParadigmKind paradigm, const SinkhornConfig& sinkhorn) {
  const InferenceCache cache = cache_queries(params);
  std::vector<Descriptor> descriptors;
  descriptors.reserve(rows.size());
  for (const ManifestRow& row : rows) {
    FeatureMap fm = features_for_row(world, row, manifest_dir);
    Matrix p_hat = predict_query_features(cache.q_f_hat, fm, params);
    Descriptor d = paradigm_aggregate(paradigm, cache.f_hat, p_hat, sinkhorn);
    d.image_id = row.id;
    descriptors.push_back(std::move(d));
  }
  return descriptors;
}

PositiveCriterion parse_criterion(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw std::runtime_error("criterion '" + text + "': expected distance:<m> or frames:<n>");
  }
  const std::string kind = text.substr(0, colon);
  const double threshold = std::stod(text.substr(colon + 1));
  if (kind == "distance") return PositiveCriterion::distance_m(threshold);
  if (kind == "frames") return PositiveCriterion::frames(threshold);
  throw std::runtime_error("criterion '" + text + "': unknown kind '" + kind + "'");
}

struct CellResult {
  std::string grid, cell;
  ParadigmKind paradigm;
  QaaConfig model;
  double recall1_mean = 0.0, recall1_min = 0.0;
  double mean_rate = 0.0;
  double inference_gflops = 0.0;
};

void write_sweep_csv(const std::string& path, const std::vector<CellResult>& cells) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "grid,cell,paradigm,n_q,c_f,c_r,c_d,recall1_mean,recall1_min,mean_coding_rate,"
         "inference_gflops\n";
  for (const CellResult& c : cells) {
    out << c.grid << ',' << c.cell << ',' << to_string(c.paradigm) << ',' << c.model.n_q << ','
        << c.model.c_f << ',' << c.model.c_r << ',' << c.model.descriptor_dim() << ','
        << format_double(c.recall1_mean) << ',' << format_double(c.recall1_min) << ','
        << format_double(c.mean_rate) << ',' << format_double(c.inference_gflops) << '\n';
  }
}

// mean coding rate of the paradigm-normalized features over the validation queries
double mean_validation_rate(const SyntheticWorld& world, const std::vector<DatasetDef>& datasets,
                            const QaaParams& params, ParadigmKind paradigm,
                            const SinkhornConfig& sinkhorn, std::size_t queries_per_place) {
  const InferenceCache cache = cache_queries(params);
  CodingRateConfig rate_cfg;
  double sum = 0.0;
  std::size_t count = 0;
  for (const DatasetDef& ds : datasets) {
    for (int place : ds.place_ids) {
      for (std::size_t i = 0; i < queries_per_place; ++i) {
        PlaceObservation obs = make_observation(world, static_cast<std::size_t>(place),
                                                ds.domain_id, 2000000 + i);
        Matrix p_hat = predict_query_features(cache.q_f_hat, obs.features, params);
        sum += coding_rate(paradigm_scores(paradigm, p_hat, sinkhorn), rate_cfg);
        ++count;
      }
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

int cmd_gen_world(const std::string& config_path, std::uint64_t seed, std::size_t places,
                  std::size_t num_domains, std::size_t c_o, std::size_t grid,
                  std::size_t db_per_place, std::size_t queries_per_place,
                  const std::string& out_dir) {
  WorldConfig config;
  if (!config_path.empty()) config = load_world_config(config_path);
  if (places) config.num_places = places;
  if (c_o) config.c_o = c_o;
  if (grid) config.grid = grid;
  if (seed) config.seed = seed;
  if (config.domains.empty()) config.domains = default_domains(num_domains ? num_domains : 3);

  write_run_manifest({"gen-world", config_path, config.seed, out_dir, kVersionString});
  SyntheticWorld world = generate_world(config);
  save_world_config((fs::path(out_dir) / "world.json").string(), config);

  for (std::size_t d = 0; d < world.domains.size(); ++d) {
    std::vector<ManifestRow> db_rows, query_rows;
    for (std::size_t p = 0; p < config.num_places; ++p) {
      for (std::size_t i = 0; i < db_per_place; ++i) {
        PlaceObservation obs = make_observation(world, p, d, 3000000 + i);
        db_rows.push_back({obs.features.image_id, obs.place_id, obs.domain_id, obs.x_m, obs.y_m,
                           obs.frame_idx, ""});
      }
      for (std::size_t i = 0; i < queries_per_place; ++i) {
        PlaceObservation obs = make_observation(world, p, d, 4000000 + i);
        query_rows.push_back({obs.features.image_id, obs.place_id, obs.domain_id, obs.x_m,
                              obs.y_m, obs.frame_idx, ""});
      }
    }
    write_manifest((fs::path(out_dir) / ("db_" + std::to_string(d) + ".csv")).string(), db_rows);
    write_manifest((fs::path(out_dir) / ("queries_" + std::to_string(d) + ".csv")).string(),
                   query_rows);
  }
  std::cout << "world with " << config.num_places << " places, " << world.domains.size()
            << " domains -> " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& world_path, std::uint64_t seed,
              const std::string& paradigm_override, std::optional<std::size_t> epochs_override,
              std::optional<double> lr_override, std::size_t workers,
              const std::string& out_dir) {
  const json j = load_json(config_path);
  TrainConfig cfg = parse_train_config(j);
  cfg.seed = seed;
  cfg.workers = workers;
  if (!paradigm_override.empty()) cfg.paradigm = paradigm_from_string(paradigm_override);
  if (epochs_override) cfg.optimizer.max_epochs = *epochs_override;
  if (lr_override) cfg.optimizer.lr = *lr_override;

  std::string wpath = world_path;
  if (wpath.empty()) {
    if (!j.contains("world")) throw std::runtime_error("train: no world given (config field 'world' or --world)");
    wpath = j.at("world").get<std::string>();
    if (fs::path(wpath).is_relative()) {
      wpath = (fs::path(config_path).parent_path() / wpath).string();
    }
  }

  write_run_manifest({"train", config_path, seed, out_dir, kVersionString});
  SyntheticWorld world = load_world(wpath);

  std::vector<int> train_domains = j.value("train_domains", std::vector<int>{});
  std::vector<DatasetDef> datasets = select_datasets(world, cfg, train_domains);
  if (datasets.size() != cfg.plan.n) {
    throw std::runtime_error("train: plan.n = " + std::to_string(cfg.plan.n) + " but " +
                             std::to_string(datasets.size()) + " datasets selected");
  }

  TrainResult result = train(world, cfg, datasets);
  save_checkpoint((fs::path(out_dir) / "checkpoint.cqsp").string(), result.params, cfg.paradigm);
  write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), result.log);

  std::cout << "best epoch " << result.best_epoch << " recall@1 "
            << format_double(result.best_recall1) << (result.diverged ? " (diverged)" : "")
            << " -> " << out_dir << "\n";
  return result.diverged ? 2 : 0;
}

int cmd_encode(const std::string& world_path, const std::string& manifest_path,
               const std::string& checkpoint_path, const std::string& paradigm_override,
               const std::string& out_path) {
  const fs::path out(out_path);
  write_run_manifest({"encode", manifest_path, 0,
                      out.parent_path().empty() ? "." : out.parent_path().string(),
                      kVersionString});
  SyntheticWorld world = load_world(world_path);
  Checkpoint ck = load_checkpoint(checkpoint_path);
  ParadigmKind paradigm =
      paradigm_override.empty() ? ck.paradigm : paradigm_from_string(paradigm_override);
  std::vector<ManifestRow> rows = read_manifest(manifest_path);
  const std::string manifest_dir = fs::path(manifest_path).parent_path().string();
  std::vector<Descriptor> descriptors =
      encode_manifest(world, rows, manifest_dir, ck.params, paradigm, SinkhornConfig{});
  write_descriptor_file(out_path, descriptors);
  std::cout << descriptors.size() << " descriptors of dim "
            << (descriptors.empty() ? 0 : descriptors[0].values.size()) << " -> " << out_path
            << "\n";
  return 0;
}

int cmd_eval(const std::string& db_path, const std::string& query_path,
             const std::string& db_manifest, const std::string& query_manifest,
             const std::string& criterion_text, const std::vector<std::size_t>& ks,
             const std::string& dataset_name, const std::string& out_path) {
  const fs::path out(out_path);
  write_run_manifest({"eval", query_manifest, 0,
                      out.parent_path().empty() ? "." : out.parent_path().string(),
                      kVersionString});
  const PositiveCriterion criterion = parse_criterion(criterion_text);

  auto to_records = [&criterion](const std::string& desc_path, const std::string& manifest_path) {
    std::vector<Descriptor> descriptors = read_descriptor_file(desc_path);
    std::vector<ManifestRow> rows = read_manifest(manifest_path);
    if (rows.size() != descriptors.size()) {
      throw std::runtime_error("eval: " + desc_path + " has " +
                               std::to_string(descriptors.size()) + " descriptors but manifest " +
                               manifest_path + " has " + std::to_string(rows.size()) + " rows");
    }
    std::vector<PlaceRecord> records(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].id != descriptors[i].image_id) {
        throw std::runtime_error("eval: id mismatch at row " + std::to_string(i) + ": '" +
                                 rows[i].id + "' vs '" + descriptors[i].image_id + "'");
      }
      // float32 storage: restore unit norm
      double sq = 0.0;
      for (double v : descriptors[i].values) sq += v * v;
      const double norm = std::sqrt(sq);
      for (double& v : descriptors[i].values) v /= norm;
      records[i].descriptor = std::move(descriptors[i]);
      if (criterion.kind == PositiveCriterion::Kind::Frames) {
        records[i].position = FramePos{rows[i].frame_idx};
      } else {
        records[i].position = PlanarPos{rows[i].x_m, rows[i].y_m};
      }
    }
    return records;
  };

  std::vector<PlaceRecord> db = to_records(db_path, db_manifest);
  std::vector<PlaceRecord> queries = to_records(query_path, query_manifest);
  RetrievalIndex index = RetrievalIndex::build(db);

  std::string name = dataset_name;
  if (name.empty()) name = fs::path(query_manifest).stem().string();

  std::ofstream report(out_path);
  if (!report) throw std::runtime_error("cannot open " + out_path + " for writing");
  report << "dataset,k,criterion,recall,excluded_queries\n";
  for (std::size_t k : ks) {
    const RecallReport r = recall_at_k(queries, index, k, criterion);
    report << name << ',' << k << ',' << criterion.to_string() << ',' << format_double(r.recall)
           << ',' << r.excluded << '\n';
    std::cout << "recall@" << k << " = " << format_double(r.recall) << " (" << r.excluded
              << " queries excluded)\n";
  }
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& world_path,
               const std::string& grid, std::uint64_t seed,
               std::optional<std::size_t> epochs_override, std::optional<std::size_t> steps_override,
               std::size_t workers, const std::string& out_dir) {
  const json j = load_json(config_path);
  write_run_manifest({"ablate", config_path, seed, out_dir, kVersionString});

  std::string wpath = world_path;
  if (wpath.empty() && j.contains("world")) {
    wpath = j.at("world").get<std::string>();
    if (fs::path(wpath).is_relative())
      wpath = (fs::path(config_path).parent_path() / wpath).string();
  }
  SyntheticWorld world = load_world(wpath);
  const ImageSpec img{world.config.grid * 14, world.config.grid * 14, 14};

  std::vector<CellResult> cells;
  auto run_cell = [&](const std::string& cell_name, TrainConfig cfg) {
    cfg.seed = seed;
    cfg.workers = workers;
    if (epochs_override) cfg.optimizer.max_epochs = *epochs_override;
    if (steps_override) cfg.steps_per_epoch = *steps_override;
    std::vector<int> train_domains = j.value("train_domains", std::vector<int>{});
    std::vector<DatasetDef> datasets = select_datasets(world, cfg, train_domains);
    if (datasets.size() != cfg.plan.n) {
      throw std::runtime_error("ablate: plan.n = " + std::to_string(cfg.plan.n) + " but " +
                               std::to_string(datasets.size()) + " datasets selected");
    }
    log_info("ablate cell " + cell_name);
    TrainResult result = train(world, cfg, datasets);

    const fs::path cell_dir = fs::path(out_dir) / ("cell_" + cell_name);
    fs::create_directories(cell_dir);
    save_checkpoint((cell_dir / "checkpoint.cqsp").string(), result.params, cfg.paradigm);
    write_metrics_csv((cell_dir / "metrics.csv").string(), result.log);

    CellResult cr;
    cr.grid = grid;
    cr.cell = cell_name;
    cr.paradigm = cfg.paradigm;
    cr.model = cfg.model;
    std::vector<double> per_dataset;
    cr.recall1_mean = validation_recall1(result.params, cfg.paradigm, cfg.sinkhorn,
                                         make_validation_set(world, datasets,
                                                             cfg.val_db_per_place,
                                                             cfg.val_queries_per_place),
                                         &per_dataset, workers);
    cr.recall1_min = per_dataset.empty() ? 0.0 : *std::min_element(per_dataset.begin(),
                                                                   per_dataset.end());
    cr.mean_rate = mean_validation_rate(world, datasets, result.params, cfg.paradigm,
                                        cfg.sinkhorn, cfg.val_queries_per_place);
    cr.inference_gflops =
        static_cast<double>(count_flops(cfg.model, img).inference_flops) / 1e9;
    cells.push_back(cr);
  };

  const TrainConfig base = parse_train_config(j);
  if (grid == "paradigms") {
    for (ParadigmKind p : {ParadigmKind::CS, ParadigmKind::OT, ParadigmKind::Softmax}) {
      TrainConfig cfg = base;
      cfg.paradigm = p;
      run_cell(to_string(p), cfg);
    }
  } else if (grid == "nq") {
    for (std::size_t n_q : {16, 32, 64, 128, 256}) {
      TrainConfig cfg = base;
      cfg.model.n_q = n_q;
      run_cell("nq" + std::to_string(n_q), cfg);
    }
  } else if (grid == "cfcr") {
    const std::vector<std::pair<std::size_t, std::size_t>> pairs = {
        {64, 128}, {64, 64}, {32, 128}, {64, 32}, {16, 128}, {64, 16}, {8, 128}};
    for (const auto& [c_f, c_r] : pairs) {
      TrainConfig cfg = base;
      cfg.model.c_f = c_f;
      cfg.model.c_r = c_r;
      run_cell("cf" + std::to_string(c_f) + "_cr" + std::to_string(c_r), cfg);
    }
  } else {
    throw std::runtime_error("ablate: unknown grid '" + grid +
                             "', expected paradigms, nq or cfcr");
  }

  write_sweep_csv((fs::path(out_dir) / "sweep.csv").string(), cells);
  std::cout << cells.size() << " cells -> " << out_dir << "/sweep.csv\n";
  return 0;
}

int cmd_coding_rate(const std::string& world_path, const std::string& manifest_path,
                    const std::string& checkpoint_path, const std::string& paradigm_override,
                    std::size_t bins, const std::string& out_dir) {
  write_run_manifest({"coding-rate", manifest_path, 0, out_dir, kVersionString});
  SyntheticWorld world = load_world(world_path);
  Checkpoint ck = load_checkpoint(checkpoint_path);
  ParadigmKind paradigm =
      paradigm_override.empty() ? ck.paradigm : paradigm_from_string(paradigm_override);
  const SinkhornConfig sinkhorn;
  const InferenceCache cache = cache_queries(ck.params);

  std::vector<ManifestRow> rows = read_manifest(manifest_path);
  const std::string manifest_dir = fs::path(manifest_path).parent_path().string();
  std::vector<Matrix> features;
  features.reserve(rows.size());
  for (const ManifestRow& row : rows) {
    FeatureMap fm = features_for_row(world, row, manifest_dir);
    Matrix p_hat = predict_query_features(cache.q_f_hat, fm, ck.params);
    features.push_back(paradigm_scores(paradigm, p_hat, sinkhorn));
  }
  RateHistogram hist = rate_histogram(features, CodingRateConfig{}, bins, to_string(paradigm));

  std::ofstream rates((fs::path(out_dir) / "rates.csv").string());
  if (!rates) throw std::runtime_error("cannot write rates.csv in " + out_dir);
  rates << "paradigm,image_id,rate\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rates << to_string(paradigm) << ',' << rows[i].id << ',' << format_double(hist.rates[i])
          << '\n';
  }

  std::ofstream hcsv((fs::path(out_dir) / "histogram.csv").string());
  if (!hcsv) throw std::runtime_error("cannot write histogram.csv in " + out_dir);
  hcsv << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    hcsv << format_double(hist.edges[b]) << ',' << format_double(hist.edges[b + 1]) << ','
         << hist.counts[b] << '\n';
  }
  std::cout << "mean rate " << format_double(hist.mean) << " variance "
            << format_double(hist.variance) << " -> " << out_dir << "\n";
  return 0;
}

int cmd_flops(const std::vector<std::size_t>& nq_list, std::size_t c_o, std::size_t c_f,
              std::size_t c_r, std::size_t heads, std::size_t height, std::size_t width,
              std::size_t stride, const std::string& out_path) {
  const ImageSpec img{height, width, stride};
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    const fs::path parent = fs::path(out_path).parent_path();
    write_run_manifest({"flops", "", 0, parent.empty() ? "." : parent.string(), kVersionString});
    file.open(out_path);
    if (!file) throw std::runtime_error("cannot open " + out_path + " for writing");
    out = &file;
  }
  *out << "n_q,c_o,c_f,c_r,image,inference_gflops,cached_gflops,total_gflops,params\n";
  for (std::size_t n_q : nq_list) {
    const QaaConfig cfg{n_q, c_o, c_f, c_r, heads};
    const FlopProfile prof = count_flops(cfg, img);
    *out << n_q << ',' << c_o << ',' << c_f << ',' << c_r << ',' << height << 'x' << width << ','
         << format_double(static_cast<double>(prof.inference_flops) / 1e9) << ','
         << format_double(static_cast<double>(prof.cached_flops) / 1e9) << ','
         << format_double(static_cast<double>(prof.total_flops) / 1e9) << ','
         << prof.param_count << '\n';
  }
  return 0;
}

int cmd_attn(const std::string& world_path, const std::string& checkpoint_path,
             std::size_t place, std::size_t domain, std::uint64_t obs_index,
             const std::vector<std::size_t>& query_ids, const std::string& out_dir) {
  write_run_manifest({"attn", checkpoint_path, 0, out_dir, kVersionString});
  SyntheticWorld world = load_world(world_path);
  Checkpoint ck = load_checkpoint(checkpoint_path);
  PlaceObservation obs = make_observation(world, place, domain, obs_index);
  const ImageSpec img{world.config.grid * 14, world.config.grid * 14, 14};
  std::vector<AttentionGrid> grids =
      export_attention_maps(obs.features, ck.params, query_ids, img);
  std::vector<std::string> written =
      write_attention_maps(grids, obs.features.image_id, out_dir);
  std::cout << written.size() << " files -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-based adaptive aggregation for place-recognition descriptors"};
  app.require_subcommand(1);

  // gen-world
  std::string gw_config, gw_out = "out";
  std::uint64_t gw_seed = 0;
  std::size_t gw_places = 0, gw_domains = 3, gw_co = 0, gw_grid = 0;
  std::size_t gw_db = 2, gw_queries = 2;
  auto* gen = app.add_subcommand("gen-world", "generate a synthetic world and manifests");
  gen->add_option("--config", gw_config, "world config JSON (optional template)");
  gen->add_option("--seed", gw_seed, "world seed (overrides config)");
  gen->add_option("--places", gw_places, "number of places");
  gen->add_option("--domains", gw_domains, "number of default domains when no config given");
  gen->add_option("--c-o", gw_co, "feature channels");
  gen->add_option("--grid", gw_grid, "patch grid side");
  gen->add_option("--db-per-place", gw_db, "database renders per place per domain");
  gen->add_option("--queries-per-place", gw_queries, "query renders per place per domain");
  gen->add_option("-o,--out", gw_out, "output directory");

  // train
  std::string tr_config, tr_world, tr_paradigm, tr_out = "out";
  std::uint64_t tr_seed = 0;
  std::size_t tr_workers = 1;
  std::optional<std::size_t> tr_epochs;
  std::optional<double> tr_lr;
  auto* tr = app.add_subcommand("train", "train the aggregation head on a synthetic world");
  tr->add_option("--config", tr_config, "train config JSON")->required();
  tr->add_option("--world", tr_world, "world JSON (overrides config field)");
  tr->add_option("--seed", tr_seed, "run seed")->required();
  tr->add_option("--paradigm", tr_paradigm, "cs|softmax|ot (overrides config)");
  tr->add_option("--epochs", tr_epochs, "max epochs override");
  tr->add_option("--lr", tr_lr, "learning rate override");
  tr->add_option("--workers", tr_workers, "worker threads (determinism only with 1)");
  tr->add_option("-o,--out", tr_out, "output directory");

  // encode
  std::string en_world, en_manifest, en_checkpoint, en_paradigm, en_out = "descriptors.bin";
  auto* en = app.add_subcommand("encode", "encode manifest observations into descriptors");
  en->add_option("--world", en_world, "world JSON")->required();
  en->add_option("--manifest", en_manifest, "observation manifest CSV")->required();
  en->add_option("--checkpoint", en_checkpoint, "trained checkpoint")->required();
  en->add_option("--paradigm", en_paradigm, "cs|softmax|ot (default: checkpoint's)");
  en->add_option("-o,--out", en_out, "output descriptor file");

  // eval
  std::string ev_db, ev_queries, ev_dbm, ev_qm, ev_criterion = "distance:25";
  std::string ev_name, ev_out = "report.csv";
  std::vector<std::size_t> ev_ks = {1};
  auto* ev = app.add_subcommand("eval", "recall@k over encoded descriptors");
  ev->add_option("--db", ev_db, "database descriptor file")->required();
  ev->add_option("--queries", ev_queries, "query descriptor file")->required();
  ev->add_option("--db-manifest", ev_dbm, "database manifest CSV")->required();
  ev->add_option("--query-manifest", ev_qm, "query manifest CSV")->required();
  ev->add_option("--criterion", ev_criterion, "distance:<m> or frames:<n>");
  ev->add_option("--k", ev_ks, "k values");
  ev->add_option("--dataset-name", ev_name, "dataset column value");
  ev->add_option("-o,--out", ev_out, "report CSV path");

  // ablate
  std::string ab_config, ab_world, ab_grid = "paradigms", ab_out = "out";
  std::uint64_t ab_seed = 0;
  std::size_t ab_workers = 1;
  std::optional<std::size_t> ab_epochs, ab_steps;
  auto* ab = app.add_subcommand("ablate", "train/eval sweeps over paradigms, n_q or (c_f, c_r)");
  ab->add_option("--config", ab_config, "train config JSON")->required();
  ab->add_option("--world", ab_world, "world JSON (overrides config field)");
  ab->add_option("--grid", ab_grid, "paradigms|nq|cfcr");
  ab->add_option("--seed", ab_seed, "run seed")->required();
  ab->add_option("--epochs", ab_epochs, "max epochs override");
  ab->add_option("--steps", ab_steps, "steps per epoch override");
  ab->add_option("--workers", ab_workers, "worker threads");
  ab->add_option("-o,--out", ab_out, "output directory");

  // coding-rate
  std::string cr_world, cr_manifest, cr_checkpoint, cr_paradigm, cr_out = "out";
  std::size_t cr_bins = 20;
  auto* cr = app.add_subcommand("coding-rate", "coding rates of score-normalized features");
  cr->add_option("--world", cr_world, "world JSON")->required();
  cr->add_option("--manifest", cr_manifest, "observation manifest CSV")->required();
  cr->add_option("--checkpoint", cr_checkpoint, "trained checkpoint")->required();
  cr->add_option("--paradigm", cr_paradigm, "cs|softmax|ot (default: checkpoint's)");
  cr->add_option("--bins", cr_bins, "histogram bins");
  cr->add_option("-o,--out", cr_out, "output directory");

  // flops
  std::vector<std::size_t> fl_nq = {16, 32, 64, 128, 256};
  std::size_t fl_co = 768, fl_cf = 64, fl_cr = 128, fl_heads = 4;
  std::size_t fl_h = 322, fl_w = 322, fl_stride = 14;
  std::string fl_out;
  auto* fl = app.add_subcommand("flops", "analytic FLOP/parameter profile");
  fl->add_option("--n-q", fl_nq, "query counts");
  fl->add_option("--c-o", fl_co, "backbone channels");
  fl->add_option("--c-f", fl_cf, "feature channels");
  fl->add_option("--c-r", fl_cr, "reference channels");
  fl->add_option("--heads", fl_heads, "attention heads");
  fl->add_option("--height", fl_h, "image height");
  fl->add_option("--width", fl_w, "image width");
  fl->add_option("--stride", fl_stride, "patch stride");
  fl->add_option("-o,--out", fl_out, "CSV output path (default stdout)");

  // attn
  std::string at_world, at_checkpoint, at_out = "out";
  std::size_t at_place = 0, at_domain = 0;
  std::uint64_t at_obs = 0;
  std::vector<std::size_t> at_queries = {0};
  auto* at = app.add_subcommand("attn", "export attention grids as CSV and PGM");
  at->add_option("--world", at_world, "world JSON")->required();
  at->add_option("--checkpoint", at_checkpoint, "trained checkpoint")->required();
  at->add_option("--place", at_place, "place id");
  at->add_option("--domain", at_domain, "domain id");
  at->add_option("--obs", at_obs, "observation index");
  at->add_option("--queries", at_queries, "query ids to export");
  at->add_option("-o,--out", at_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen_world(gw_config, gw_seed, gw_places, gw_domains, gw_co, gw_grid, gw_db,
                           gw_queries, gw_out);
    }
    if (tr->parsed()) {
      return cmd_train(tr_config, tr_world, tr_seed, tr_paradigm, tr_epochs, tr_lr, tr_workers,
                       tr_out);
    }
    if (en->parsed()) return cmd_encode(en_world, en_manifest, en_checkpoint, en_paradigm, en_out);
    if (ev->parsed()) {
      return cmd_eval(ev_db, ev_queries, ev_dbm, ev_qm, ev_criterion, ev_ks, ev_name, ev_out);
    }
    if (ab->parsed()) {
      return cmd_ablate(ab_config, ab_world, ab_grid, ab_seed, ab_epochs, ab_steps, ab_workers,
                        ab_out);
    }
    if (cr->parsed()) {
      return cmd_coding_rate(cr_world, cr_manifest, cr_checkpoint, cr_paradigm, cr_bins, cr_out);
    }
    if (fl->parsed()) {
      return cmd_flops(fl_nq, fl_co, fl_cf, fl_cr, fl_heads, fl_h, fl_w, fl_stride, fl_out);
    }
    if (at->parsed()) {
      return cmd_attn(at_world, at_checkpoint, at_place, at_domain, at_obs, at_queries, at_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
