#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cqs/coding_rate.hpp"
#include "cqs/io.hpp"
#include "cqs/retrieval.hpp"
#include "cqs/trainer.hpp"

namespace py = pybind11;
using namespace cqs;

namespace {

Matrix to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& array) {
  if (array.ndim() != 2) throw std::invalid_argument("expected a 2-d array");
  Matrix m(static_cast<std::size_t>(array.shape(0)), static_cast<std::size_t>(array.shape(1)));
  std::copy(array.data(), array.data() + m.size(), m.data());
  return m;
}

py::array_t<double> to_array(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), out.mutable_data());
  return out;
}

py::array_t<double> vec_to_array(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

SinkhornConfig sinkhorn_config(std::size_t max_iters, double tol, double temperature) {
  SinkhornConfig cfg;
  cfg.max_iters = max_iters;
  cfg.tol = tol;
  cfg.temperature = temperature;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_cqs, m) {
  m.doc() = "query-based adaptive aggregation: attention kernels, cross-query similarity "
            "descriptors, coding-rate analysis and retrieval evaluation";

  py::class_<QaaConfig>(m, "QaaConfig")
      .def(py::init([](std::size_t n_q, std::size_t c_o, std::size_t c_f, std::size_t c_r,
                       std::size_t heads) {
             return QaaConfig{n_q, c_o, c_f, c_r, heads};
           }),
           py::arg("n_q"), py::arg("c_o"), py::arg("c_f"), py::arg("c_r"), py::arg("heads") = 4)
      .def_readwrite("n_q", &QaaConfig::n_q)
      .def_readwrite("c_o", &QaaConfig::c_o)
      .def_readwrite("c_f", &QaaConfig::c_f)
      .def_readwrite("c_r", &QaaConfig::c_r)
      .def_readwrite("heads", &QaaConfig::heads)
      .def_property_readonly("descriptor_dim", &QaaConfig::descriptor_dim);

  py::class_<QaaParams>(m, "QaaParams")
      .def_property_readonly("config", [](const QaaParams& p) { return p.config; })
      .def_property_readonly("q_f", [](const QaaParams& p) { return to_array(p.q_f); })
      .def_property_readonly("q_r", [](const QaaParams& p) { return to_array(p.q_r); });

  m.def("make_params", &make_qaa_params, py::arg("config"), py::arg("seed"),
        "randomly initialized aggregation parameters (seeded)");

  m.def(
      "refine_feature_queries",
      [](const QaaParams& p) { return to_array(refine_feature_queries(p)); },
      py::arg("params"));
  m.def(
      "build_reference_codebook",
      [](const QaaParams& p) { return to_array(build_reference_codebook(p)); },
      py::arg("params"));

  m.def(
      "predict_query_features",
      [](const QaaParams& params, py::array_t<double> patches) {
        FeatureMap fm;
        fm.patches = to_matrix(patches);
        Matrix q_f_hat = refine_feature_queries(params);
        return to_array(predict_query_features(q_f_hat, fm, params));
      },
      py::arg("params"), py::arg("patches"));

  m.def(
      "encode",
      [](const QaaParams& params, py::array_t<double> patches, const std::string& paradigm) {
        FeatureMap fm;
        fm.patches = to_matrix(patches);
        InferenceCache cache = cache_queries(params);
        Matrix p_hat = predict_query_features(cache.q_f_hat, fm, params);
        Descriptor d = paradigm_aggregate(paradigm_from_string(paradigm), cache.f_hat, p_hat,
                                          SinkhornConfig{});
        return vec_to_array(d.values);
      },
      py::arg("params"), py::arg("patches"), py::arg("paradigm") = "cs",
      "unit-norm descriptor for one patch-level feature map");

  m.def(
      "cross_query_similarity",
      [](py::array_t<double> f_hat, py::array_t<double> p_hat) {
        return to_array(cross_query_similarity(to_matrix(f_hat), to_matrix(p_hat)));
      },
      py::arg("f_hat"), py::arg("p_hat"));

  m.def(
      "normalize_descriptor",
      [](py::array_t<double> s) { return vec_to_array(normalize_descriptor(to_matrix(s)).values); },
      py::arg("s"));

  m.def(
      "softmax_rows",
      [](py::array_t<double> x) { return to_array(softmax_rows(to_matrix(x))); }, py::arg("x"));

  m.def(
      "sinkhorn_normalize",
      [](py::array_t<double> x, std::size_t max_iters, double tol, double temperature) {
        SinkhornResult res =
            sinkhorn_normalize(to_matrix(x), sinkhorn_config(max_iters, tol, temperature));
        return py::make_tuple(to_array(res.scores), res.converged, res.iters);
      },
      py::arg("x"), py::arg("max_iters") = 100, py::arg("tol") = 1e-6,
      py::arg("temperature") = 1.0, "returns (scores, converged, iterations)");

  m.def(
      "coding_rate",
      [](py::array_t<double> p_hat, double epsilon) {
        return coding_rate(to_matrix(p_hat), CodingRateConfig{epsilon});
      },
      py::arg("p_hat"), py::arg("epsilon") = 0.001);

  m.def(
      "count_flops",
      [](const QaaConfig& config, std::size_t height, std::size_t width, std::size_t stride) {
        const FlopProfile prof = count_flops(config, ImageSpec{height, width, stride});
        py::dict out;
        out["inference_flops"] = prof.inference_flops;
        out["cached_flops"] = prof.cached_flops;
        out["total_flops"] = prof.total_flops;
        out["params"] = prof.param_count;
        out["convention"] = prof.convention;
        py::dict stages;
        for (const auto& st : prof.stages) stages[py::str(st.name)] = st.flops;
        out["stages"] = stages;
        return out;
      },
      py::arg("config"), py::arg("height") = 322, py::arg("width") = 322, py::arg("stride") = 14);

  m.def("haversine_m", &haversine_m, py::arg("lat1"), py::arg("lon1"), py::arg("lat2"),
        py::arg("lon2"));

  py::class_<RetrievalIndex>(m, "RetrievalIndex")
      .def_static(
          "from_arrays",
          [](py::array_t<double> descriptors, const std::vector<std::string>& ids) {
            Matrix packed = to_matrix(descriptors);
            if (packed.rows() != ids.size()) {
              throw std::invalid_argument("descriptor count does not match id count");
            }
            std::vector<PlaceRecord> records(ids.size());
            for (std::size_t r = 0; r < ids.size(); ++r) {
              records[r].descriptor.image_id = ids[r];
              records[r].descriptor.values.assign(packed.row(r), packed.row(r) + packed.cols());
              records[r].position = FramePos{static_cast<long>(r)};
            }
            return RetrievalIndex::build(records);
          },
          py::arg("descriptors"), py::arg("ids"))
      .def_property_readonly("size", &RetrievalIndex::size)
      .def_property_readonly("dim", &RetrievalIndex::dim)
      .def(
          "top_k",
          [](const RetrievalIndex& index, py::array_t<double> query, std::size_t k) {
            Descriptor d;
            const auto info = query.request();
            d.values.assign(static_cast<const double*>(info.ptr),
                            static_cast<const double*>(info.ptr) + info.size);
            RetrievalIndex::TopK top = index.top_k(d, k);
            py::list hits;
            for (const auto& hit : top.hits) hits.append(py::make_tuple(hit.id, hit.score));
            return hits;
          },
          py::arg("query"), py::arg("k") = 1);

  py::class_<SyntheticWorld>(m, "SyntheticWorld")
      .def_property_readonly("num_places",
                             [](const SyntheticWorld& w) { return w.config.num_places; })
      .def_property_readonly("num_domains",
                             [](const SyntheticWorld& w) { return w.domains.size(); })
      .def_property_readonly("patch_count", &SyntheticWorld::patch_count);

  m.def(
      "generate_world",
      [](std::size_t num_places, std::size_t num_domains, std::size_t c_o, std::uint64_t seed,
         std::size_t grid, double area_m) {
        WorldConfig cfg;
        cfg.num_places = num_places;
        cfg.c_o = c_o;
        cfg.seed = seed;
        cfg.grid = grid;
        cfg.area_m = area_m;
        for (std::size_t d = 0; d < num_domains; ++d) {
          DomainConfig dc;
          dc.viewpoint_spread = d == 0 ? 0.05 : 0.3 + 0.1 * static_cast<double>(d);
          dc.appearance_angle = 0.7 + 0.2 * static_cast<double>(d);
          dc.appearance_bias = 0.6 + 0.2 * static_cast<double>(d);
          cfg.domains.push_back(dc);
        }
        return generate_world(cfg);
      },
      py::arg("num_places"), py::arg("num_domains"), py::arg("c_o"), py::arg("seed"),
      py::arg("grid") = 7, py::arg("area_m") = 2500.0);

  m.def(
      "render_observation",
      [](const SyntheticWorld& world, std::size_t place, std::size_t domain,
         std::uint64_t obs_index) {
        PlaceObservation obs = make_observation(world, place, domain, obs_index);
        py::dict out;
        out["patches"] = to_array(obs.features.patches);
        out["image_id"] = obs.features.image_id;
        out["place_id"] = obs.place_id;
        out["domain_id"] = obs.domain_id;
        out["x_m"] = obs.x_m;
        out["y_m"] = obs.y_m;
        return out;
      },
      py::arg("world"), py::arg("place"), py::arg("domain"), py::arg("obs_index") = 0);

  m.def("save_checkpoint",
        [](const std::string& path, const QaaParams& params, const std::string& paradigm) {
          save_checkpoint(path, params, paradigm_from_string(paradigm));
        });
  m.def("load_checkpoint", [](const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    return py::make_tuple(ck.params, std::string(to_string(ck.paradigm)));
  });

  m.attr("__version__") = kVersionString;
}
