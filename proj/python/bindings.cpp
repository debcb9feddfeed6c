#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "ms2d/data_pipeline.hpp"
#include "ms2d/scan_catalog.hpp"
#include "ms2d/segnet.hpp"
#include "ms2d/ssm_core.hpp"
#include "ms2d/stats_bench.hpp"
#include "ms2d/training.hpp"

namespace py = pybind11;
using ms2d::Tensor;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  std::vector<std::int64_t> shape(static_cast<std::size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = a.shape(i);
  Tensor t(shape);
  std::memcpy(t.data(), a.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
  return t;
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::memcpy(a.mutable_data(), t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
  return a;
}

ms2d::ScanPermutation perm_for(const std::string& scan, std::int64_t rows, std::int64_t cols) {
  return ms2d::path_order(ms2d::scan_id_from_string(scan), {rows, cols});
}

ms2d::ModelConfig make_config(int experiment_id, std::int64_t img_size, std::int64_t in_channels,
                              std::int64_t embed_dim, int stages, std::int64_t state_dim, std::int64_t out_classes) {
  ms2d::ModelConfig cfg;
  cfg.img_size = img_size;
  cfg.in_channels = in_channels;
  cfg.encoder_depths.assign(static_cast<std::size_t>(stages), 2);
  cfg.decoder_depths.assign(static_cast<std::size_t>(stages), 2);
  cfg.decoder_depths.back() = 1;
  cfg.stage_channels.clear();
  for (int s = 0; s < stages; ++s) cfg.stage_channels.push_back(embed_dim << s);
  cfg.state_dim = state_dim;
  cfg.out_classes = out_classes;
  cfg.experiment_id = experiment_id;
  cfg.validate();
  return cfg;
}

ms2d::Dataset to_dataset(const DoubleArray& images, const DoubleArray& masks) {
  if (images.ndim() != 4 || masks.ndim() != 3) throw std::invalid_argument("expect images [B,C,S,S], masks [B,S,S]");
  const py::ssize_t B = images.shape(0);
  if (masks.shape(0) != B) throw std::invalid_argument("images/masks batch mismatch");
  ms2d::Dataset ds;
  const Tensor imgs = to_tensor(images), msks = to_tensor(masks);
  const std::int64_t img_sz = imgs.size() / B, msk_sz = msks.size() / B;
  for (py::ssize_t b = 0; b < B; ++b) {
    ms2d::Sample s;
    s.image = Tensor({images.shape(1), images.shape(2), images.shape(3)});
    for (std::int64_t i = 0; i < img_sz; ++i) s.image[i] = imgs[b * img_sz + i];
    s.mask = Tensor({masks.shape(1), masks.shape(2)});
    for (std::int64_t i = 0; i < msk_sz; ++i) s.mask[i] = msks[b * msk_sz + i];
    ds.push_back(std::move(s));
  }
  return ds;
}

struct PyModel {
  ms2d::ModelParams params;

  py::array_t<double> forward(const DoubleArray& images) { return to_array(ms2d::forward(params, to_tensor(images))); }

  std::int64_t count_params() const { return ms2d::count_params(params); }
  std::int64_t count_flops() const { return ms2d::count_flops(params.cfg); }
  int experiment_id() const { return params.cfg.experiment_id; }

  void save(const std::string& path) const { ms2d::save_checkpoint(params, path); }

  py::list fit(const DoubleArray& train_images, const DoubleArray& train_masks, const DoubleArray& val_images,
               const DoubleArray& val_masks, int epochs, int batch_size, double lr, std::uint64_t seed,
               const std::string& loss) {
    ms2d::TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.lr0 = lr;
    tc.seed = seed;
    tc.loss_kind = loss == "ce_mdice" ? ms2d::LossKind::CeMdice : ms2d::LossKind::BceDice;
    const ms2d::Dataset tr = to_dataset(train_images, train_masks);
    const ms2d::Dataset va = to_dataset(val_images, val_masks);
    ms2d::TrainResult res = ms2d::train(params, tr, va, tc);
    ms2d::restore_values(params, res.best_values);
    py::list curve;
    for (const auto& r : res.curve) {
      py::dict d;
      d["epoch"] = r.epoch;
      d["train_loss"] = r.train_loss;
      d["val_loss"] = r.val_loss;
      d["val_dice"] = r.val_dice;
      d["val_miou"] = r.val_miou;
      curve.append(d);
    }
    return curve;
  }

  py::dict evaluate(const DoubleArray& images, const DoubleArray& masks, const std::string& loss) {
    const ms2d::EvalResult ev =
        ms2d::evaluate(params, to_dataset(images, masks),
                       loss == "ce_mdice" ? ms2d::LossKind::CeMdice : ms2d::LossKind::BceDice);
    py::dict d;
    d["loss"] = ev.loss;
    d["dice"] = ev.dice;
    d["miou"] = ev.miou;
    return d;
  }
};

py::dict friedman_dict(const ms2d::FriedmanResult& r) {
  py::dict d;
  d["chi2"] = r.chi2;
  d["df"] = r.df;
  d["p"] = r.p;
  d["mean_ranks"] = r.mean_ranks;
  return d;
}

ms2d::ScoreMatrix matrix_from(const std::vector<std::string>& datasets, const std::vector<std::string>& experiments,
                              const DoubleArray& scores) {
  ms2d::ScoreMatrix s;
  s.datasets = datasets;
  s.experiments = experiments;
  s.scores = to_tensor(scores);
  s.validate();
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-scan selective state-space segmentation kernels";
  m.attr("__version__") = "0.1.0";

  // ---- scan catalogue ----
  m.def("scan_order", [](const std::string& scan, std::int64_t rows, std::int64_t cols) {
    return perm_for(scan, rows, cols).order;
  }, py::arg("scan"), py::arg("rows"), py::arg("cols"), "Visitation order (row-major linear indices)");
  m.def("scan_inverse", [](const std::string& scan, std::int64_t rows, std::int64_t cols) {
    return perm_for(scan, rows, cols).inverse;
  }, py::arg("scan"), py::arg("rows"), py::arg("cols"));
  m.def("experiment_streams", [](int id) {
    const auto cfg = ms2d::experiment_streams(id);
    std::vector<std::string> out;
    for (auto s : cfg.streams) out.push_back(ms2d::to_string(s));
    return out;
  }, py::arg("id"));
  m.def("serialize", [](const DoubleArray& v, const std::string& scan) {
    const Tensor t = to_tensor(v);
    if (t.rank() != 3) throw std::invalid_argument("serialize: expects [H,W,C]");
    return to_array(ms2d::serialize(t, perm_for(scan, t.dim(0), t.dim(1))));
  }, py::arg("feature_map"), py::arg("scan"));
  m.def("deserialize", [](const DoubleArray& s, const std::string& scan, std::int64_t rows, std::int64_t cols) {
    return to_array(ms2d::deserialize(to_tensor(s), perm_for(scan, rows, cols)));
  }, py::arg("sequence"), py::arg("scan"), py::arg("rows"), py::arg("cols"));
  m.def("scan_dump_csv", [](std::int64_t rows, std::int64_t cols) { return ms2d::scan_dump_csv({rows, cols}); },
        py::arg("rows"), py::arg("cols"));

  // ---- selective SSM ----
  py::class_<ms2d::SsmStreamParams>(m, "SsmStreamParams")
      .def_static("init", &ms2d::SsmStreamParams::init, py::arg("channels"), py::arg("state_dim"), py::arg("seed"))
      .def_property_readonly("state_dim", [](const ms2d::SsmStreamParams& p) { return p.state_dim; })
      .def_property_readonly("channels", &ms2d::SsmStreamParams::channels);
  m.def("zoh_discretize", [](double a, double b, double delta) { return ms2d::zoh_discretize(a, b, delta); },
        py::arg("a"), py::arg("b"), py::arg("delta"));
  m.def("ssm_scan_sequential", [](const DoubleArray& x, const ms2d::SsmStreamParams& p) {
    return to_array(ms2d::ssm_scan_sequential(to_tensor(x), p));
  }, py::arg("x"), py::arg("params"));
  m.def("ssm_scan_parallel", [](const DoubleArray& x, const ms2d::SsmStreamParams& p) {
    return to_array(ms2d::ssm_scan_parallel(to_tensor(x), p));
  }, py::arg("x"), py::arg("params"));
  m.def("mamba_stream_forward", [](const DoubleArray& x, const ms2d::SsmStreamParams& p) {
    return to_array(ms2d::mamba_stream_forward(to_tensor(x), p));
  }, py::arg("x"), py::arg("params"));

  // ---- losses / metrics ----
  m.def("dice_loss", [](const DoubleArray& p, const DoubleArray& t, double smooth) {
    return ms2d::dice_loss(to_tensor(p), to_tensor(t), smooth);
  }, py::arg("probs"), py::arg("target"), py::arg("smooth") = 1e-5);
  m.def("bce_dice_loss", [](const DoubleArray& p, const DoubleArray& t) {
    return ms2d::bce_dice_loss(to_tensor(p), to_tensor(t));
  }, py::arg("probs"), py::arg("target"));
  m.def("ce_mdice_loss", [](const DoubleArray& logits, const DoubleArray& target) {
    return ms2d::ce_mdice_loss(to_tensor(logits), to_tensor(target));
  }, py::arg("logits"), py::arg("target_classes"));
  m.def("dice_metric", [](const DoubleArray& p, const DoubleArray& t) {
    return ms2d::dice_metric(to_tensor(p), to_tensor(t));
  }, py::arg("pred_mask"), py::arg("target_mask"));
  m.def("miou_metric", [](const DoubleArray& p, const DoubleArray& t) {
    return ms2d::miou_metric(to_tensor(p), to_tensor(t));
  }, py::arg("pred_mask"), py::arg("target_mask"));
  m.def("cosine_lr", [](std::int64_t t, std::int64_t total, double lr0, double lr_min) {
    ms2d::TrainConfig cfg;
    cfg.lr0 = lr0;
    cfg.lr_min = lr_min;
    return ms2d::cosine_lr(t, total, cfg);
  }, py::arg("t"), py::arg("total"), py::arg("lr0") = 1e-3, py::arg("lr_min") = 1e-6);

  // ---- statistics ----
  m.def("rank_matrix", [](const DoubleArray& scores) {
    ms2d::ScoreMatrix s;
    s.scores = to_tensor(scores);
    for (std::int64_t i = 0; i < s.scores.dim(0); ++i) s.datasets.push_back("d" + std::to_string(i));
    for (std::int64_t j = 0; j < s.scores.dim(1); ++j) s.experiments.push_back("e" + std::to_string(j));
    return to_array(ms2d::rank_matrix(s));
  }, py::arg("scores"));
  m.def("friedman", [](const DoubleArray& scores, bool tie_correction) {
    ms2d::ScoreMatrix s;
    s.scores = to_tensor(scores);
    for (std::int64_t i = 0; i < s.scores.dim(0); ++i) s.datasets.push_back("d" + std::to_string(i));
    for (std::int64_t j = 0; j < s.scores.dim(1); ++j) s.experiments.push_back("e" + std::to_string(j));
    return friedman_dict(ms2d::friedman(s, tie_correction));
  }, py::arg("scores"), py::arg("tie_correction") = false);
  m.def("chi2_sf", &ms2d::chi2_sf, py::arg("x"), py::arg("df"));
  m.def("table2_dice", [] {
    const auto s = ms2d::table2_dice();
    return py::make_tuple(s.datasets, s.experiments, to_array(s.scores));
  });
  m.def("table2_miou", [] {
    const auto s = ms2d::table2_miou();
    return py::make_tuple(s.datasets, s.experiments, to_array(s.scores));
  });
  m.def("summarize_markdown", [](const std::vector<std::string>& datasets,
                                 const std::vector<std::string>& experiments, const DoubleArray& dice) {
    return ms2d::summarize(matrix_from(datasets, experiments, dice)).to_markdown();
  }, py::arg("datasets"), py::arg("experiments"), py::arg("dice"));

  // ---- data pipeline ----
  m.def("minmax_normalize", [](const DoubleArray& volume) {
    ms2d::Volume v;
    v.slices = to_tensor(volume);
    return to_array(ms2d::minmax_normalize(v).slices);
  }, py::arg("volume"));
  m.def("resize_bilinear", [](const DoubleArray& slice, std::int64_t out) {
    return to_array(ms2d::resize_bilinear(to_tensor(slice), out));
  }, py::arg("slice"), py::arg("out"));
  m.def("subject_split", [](std::vector<std::string> ids, std::uint64_t seed) {
    const auto s = ms2d::subject_split(std::move(ids), seed);
    py::dict d;
    d["train"] = s.train;
    d["val"] = s.val;
    d["test"] = s.test;
    return d;
  }, py::arg("case_ids"), py::arg("seed"));
  m.def("generate_phantom", [](int n_cases, std::int64_t grid, int min_lesions, int max_lesions, double eccentricity,
                               double theta, double texture, double noise, double contrast, std::uint64_t seed) {
    ms2d::PhantomSpec spec;
    spec.n_cases = n_cases;
    spec.grid = grid;
    spec.min_lesions = min_lesions;
    spec.max_lesions = max_lesions;
    spec.eccentricity = eccentricity;
    spec.theta = theta;
    spec.texture_strength = texture;
    spec.noise_sigma = noise;
    spec.contrast = contrast;
    spec.seed = seed;
    py::list out;
    for (const auto& c : ms2d::generate_phantom(spec)) {
      py::dict d;
      d["case_id"] = c.case_id;
      d["image"] = to_array(c.image);
      d["mask"] = to_array(c.mask);
      out.append(d);
    }
    return out;
  }, py::arg("n_cases") = 48, py::arg("grid") = 32, py::arg("min_lesions") = 1, py::arg("max_lesions") = 3,
     py::arg("eccentricity") = 0.6, py::arg("theta") = 0.6, py::arg("texture") = 0.2, py::arg("noise") = 0.05,
     py::arg("contrast") = 0.3, py::arg("seed") = 7);
  m.def("write_tensors", [](const std::string& path, const py::dict& tensors) {
    std::vector<ms2d::NamedTensor> ts;
    for (auto item : tensors) {
      ts.push_back({py::cast<std::string>(item.first), to_tensor(py::cast<DoubleArray>(item.second))});
    }
    ms2d::write_tensors(path, ts);
  }, py::arg("path"), py::arg("tensors"));
  m.def("read_tensors", [](const std::string& path) {
    py::dict d;
    for (const auto& t : ms2d::read_tensors(path)) d[py::str(t.name)] = to_array(t.value);
    return d;
  }, py::arg("path"));

  // ---- model ----
  py::class_<PyModel>(m, "Model")
      .def(py::init([](int experiment_id, std::int64_t img_size, std::int64_t in_channels, std::int64_t embed_dim,
                       int stages, std::int64_t state_dim, std::int64_t out_classes, std::uint64_t seed) {
             PyModel pm{ms2d::build_model(
                 make_config(experiment_id, img_size, in_channels, embed_dim, stages, state_dim, out_classes), seed)};
             return pm;
           }),
           py::arg("experiment_id") = 1, py::arg("img_size") = 32, py::arg("in_channels") = 1,
           py::arg("embed_dim") = 16, py::arg("stages") = 4, py::arg("state_dim") = 8, py::arg("out_classes") = 1,
           py::arg("seed") = 0)
      .def("forward", &PyModel::forward, py::arg("images"))
      .def("count_params", &PyModel::count_params)
      .def("count_flops", &PyModel::count_flops)
      .def_property_readonly("experiment_id", &PyModel::experiment_id)
      .def("save", &PyModel::save, py::arg("path"))
      .def_static("load", [](const std::string& path) { return PyModel{ms2d::load_checkpoint(path)}; }, py::arg("path"))
      .def("fit", &PyModel::fit, py::arg("train_images"), py::arg("train_masks"), py::arg("val_images"),
           py::arg("val_masks"), py::arg("epochs") = 5, py::arg("batch_size") = 8, py::arg("lr") = 1e-3,
           py::arg("seed") = 0, py::arg("loss") = "bce_dice")
      .def("evaluate", &PyModel::evaluate, py::arg("images"), py::arg("masks"), py::arg("loss") = "bce_dice");
}
