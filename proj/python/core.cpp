#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <numeric>

#include "spx/error.hpp"
#include "spx/pipeline.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// H x W or H x W x C array in [0, 1] -> planar image.
spx::Image to_image(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw spx::ShapeError("image array must be HxW or HxWxC");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  spx::Image img(h, w, c);
  const double* src = a.data();
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      for (int ch = 0; ch < c; ++ch) img.at(ch, r, col) = src[(static_cast<std::size_t>(r) * w + col) * c + ch];
    }
  }
  img.validate();
  return img;
}

py::array_t<double> from_image(const spx::Image& img) {
  std::vector<py::ssize_t> shape = {img.height, img.width};
  if (img.channels > 1) shape.push_back(img.channels);
  py::array_t<double> out(shape);
  double* dst = out.mutable_data();
  for (int r = 0; r < img.height; ++r) {
    for (int col = 0; col < img.width; ++col) {
      for (int ch = 0; ch < img.channels; ++ch) {
        dst[(static_cast<std::size_t>(r) * img.width + col) * img.channels + ch] = img.at(ch, r, col);
      }
    }
  }
  return out;
}

// N x H x W (or N x H x W x C) array plus labels -> dataset.
spx::LabeledDataset to_dataset(const Array& images, const std::vector<int>& labels) {
  if (images.ndim() != 3 && images.ndim() != 4) throw spx::ShapeError("images must be NxHxW or NxHxWxC");
  const auto n = static_cast<std::size_t>(images.shape(0));
  if (labels.size() != n) throw spx::ConsistencyError("got " + std::to_string(n) + " images but " +
                                                       std::to_string(labels.size()) + " labels");
  spx::LabeledDataset ds;
  const std::size_t per = n == 0 ? 0 : static_cast<std::size_t>(images.size()) / n;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<py::ssize_t> shape(images.shape() + 1, images.shape() + images.ndim());
    Array one(shape, images.data() + i * per);
    ds.images.push_back(to_image(one));
  }
  ds.labels = labels;
  ds.num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  return ds;
}

spx::SlicConfig slic_config(int n, double compactness, int max_iters, bool connectivity) {
  spx::SlicConfig cfg;
  cfg.n_superpixels = n;
  cfg.compactness = compactness;
  cfg.max_iters = max_iters;
  cfg.enforce_connectivity = connectivity;
  return cfg;
}

spx::GraphConfig graph_config(std::optional<double> radius, int max_neighbors) {
  spx::GraphConfig cfg;
  cfg.radius = radius;
  cfg.max_neighbors = max_neighbors;
  return cfg;
}

py::dict eval_dict(const spx::EvalResult& r) {
  py::dict d;
  d["count"] = r.count;
  d["loss"] = r.loss;
  d["accuracy"] = r.accuracy;
  if (r.cnn_accuracy) d["cnn_accuracy"] = *r.cnn_accuracy;
  if (r.gnn_accuracy) d["gnn_accuracy"] = *r.gnn_accuracy;
  if (r.hybrid_accuracy) d["hybrid_accuracy"] = *r.hybrid_accuracy;
  return d;
}

struct DataArgs {
  std::optional<spx::LabeledDataset> images;
  std::optional<std::vector<spx::SuperpixelGraph>> graphs;

  DataArgs(const std::optional<Array>& imgs, const std::optional<std::vector<spx::SuperpixelGraph>>& gs,
           std::optional<std::vector<int>> labels) {
    if (!labels && gs) {
      labels.emplace();
      for (const auto& g : *gs) labels->push_back(g.label);
    }
    if (imgs) {
      if (!labels) labels.emplace(static_cast<std::size_t>(imgs->shape(0)), 0);
      images = to_dataset(*imgs, *labels);
    }
    graphs = gs;
  }
  spx::TrainData view() const { return {images ? &*images : nullptr, graphs ? &*graphs : nullptr}; }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Superpixel graphs and coupled CNN+GNN image classification";

  py::register_exception<spx::Error>(m, "Error");

  m.def(
      "load_idx",
      [](const std::filesystem::path& images, const std::filesystem::path& labels) {
        const auto ds = spx::load_idx(images, labels);
        const auto n = static_cast<py::ssize_t>(ds.size());
        const int h = n ? ds.images[0].height : 0, w = n ? ds.images[0].width : 0;
        py::array_t<double> out({n, static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
        double* dst = out.mutable_data();
        for (const auto& img : ds.images) dst = std::copy(img.pixels.begin(), img.pixels.end(), dst);
        return py::make_tuple(out, py::array_t<int>(static_cast<py::ssize_t>(ds.labels.size()), ds.labels.data()));
      },
      py::arg("images"), py::arg("labels"), "Read IDX files; returns (N x H x W images in [0, 1], labels).");

  m.def("read_pnm", [](const std::filesystem::path& p) { return from_image(spx::read_pnm(p)); }, py::arg("path"));
  m.def("write_pnm", [](const Array& img, const std::filesystem::path& p) { spx::write_pnm(to_image(img), p); },
        py::arg("image"), py::arg("path"));

  m.def(
      "slic",
      [](const Array& image, int n_superpixels, double compactness, int max_iters, bool enforce_connectivity) {
        const auto seg = spx::slic_segment(to_image(image),
                                           slic_config(n_superpixels, compactness, max_iters, enforce_connectivity));
        py::array_t<std::int32_t> labels({seg.height, seg.width});
        std::copy(seg.labels.begin(), seg.labels.end(), labels.mutable_data());
        return labels;
      },
      py::arg("image"), py::arg("n_superpixels") = 75, py::arg("compactness") = 10.0, py::arg("max_iters") = 10,
      py::arg("enforce_connectivity") = true, "SLIC label map (H x W, labels 0..K-1).");

  py::class_<spx::SuperpixelGraph>(m, "Graph")
      .def_readonly("num_nodes", &spx::SuperpixelGraph::num_nodes)
      .def_readonly("feature_dim", &spx::SuperpixelGraph::feature_dim)
      .def_readwrite("label", &spx::SuperpixelGraph::label)
      .def_property_readonly("features",
                             [](const spx::SuperpixelGraph& g) {
                               py::array_t<float> a({static_cast<py::ssize_t>(g.num_nodes),
                                                     static_cast<py::ssize_t>(g.feature_dim)});
                               std::copy(g.node_features.begin(), g.node_features.end(), a.mutable_data());
                               return a;
                             })
      .def_property_readonly("edges",
                             [](const spx::SuperpixelGraph& g) {
                               py::array_t<std::uint32_t> a({static_cast<py::ssize_t>(g.edges.size()), py::ssize_t{2}});
                               auto* dst = a.mutable_data();
                               for (auto [i, j] : g.edges) {
                                 *dst++ = i;
                                 *dst++ = j;
                               }
                               return a;
                             })
      .def("__eq__", [](const spx::SuperpixelGraph& a, const spx::SuperpixelGraph& b) { return a == b; })
      .def("__repr__", [](const spx::SuperpixelGraph& g) {
        return "<Graph nodes=" + std::to_string(g.num_nodes) + " edges=" + std::to_string(g.edges.size()) +
               " label=" + std::to_string(g.label) + ">";
      });

  m.def(
      "radius_graph",
      [](const Array& image, int label, int n_superpixels, double compactness, std::optional<double> radius,
         int max_neighbors) {
        const auto img = to_image(image);
        const auto seg = spx::slic_segment(img, slic_config(n_superpixels, compactness, 10, true));
        const auto stats = spx::segment_stats(seg, img);
        return spx::build_radius_graph(stats, img.height, img.width, graph_config(radius, max_neighbors), label);
      },
      py::arg("image"), py::arg("label") = 0, py::arg("n_superpixels") = 75, py::arg("compactness") = 10.0,
      py::arg("radius") = py::none(), py::arg("max_neighbors") = 5,
      "Superpixel radius graph of one image (radius defaults to the image diagonal).");

  m.def("load_graphs", &spx::load_graphs, py::arg("path"));
  m.def(
      "save_graphs",
      [](const std::vector<spx::SuperpixelGraph>& graphs, const std::filesystem::path& p) { spx::save_graphs(graphs, p); },
      py::arg("graphs"), py::arg("path"));

  py::class_<spx::Checkpoint>(m, "Model")
      .def_static("load", &spx::load_checkpoint, py::arg("path"))
      .def("save", [](const spx::Checkpoint& c, const std::filesystem::path& p) { spx::save_checkpoint(c, p); },
           py::arg("path"))
      .def_property_readonly("kind", [](const spx::Checkpoint& c) { return spx::to_string(c.arch.kind); })
      .def_property_readonly("alpha", [](const spx::Checkpoint& c) { return c.arch.hybrid.alpha; })
      .def(
          "evaluate",
          [](const spx::Checkpoint& c, const std::optional<Array>& images, const std::optional<std::vector<int>>& labels,
             const std::optional<std::vector<spx::SuperpixelGraph>>& graphs) {
            const DataArgs data(images, graphs, labels);
            spx::EvalResult r;
            {
              py::gil_scoped_release release;
              r = spx::evaluate(c, data.view());
            }
            return eval_dict(r);
          },
          py::arg("images") = py::none(), py::arg("labels") = py::none(), py::arg("graphs") = py::none())
      .def(
          "predict",
          [](const spx::Checkpoint& c, const std::optional<Array>& images,
             const std::optional<std::vector<spx::SuperpixelGraph>>& graphs) {
            const DataArgs data(images, graphs, std::nullopt);
            spx::Classifier model(c);
            std::vector<std::size_t> idx(data.view().size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            const auto logits = spx::predict_logits(model, data.view(), idx);
            switch (c.arch.kind) {
              case spx::ModelKind::cnn:
                return spx::argmax_rows(logits.h_cnn);
              case spx::ModelKind::gnn:
                return spx::argmax_rows(logits.h_gnn);
              default:
                return spx::hybrid_predict(logits, c.arch.hybrid);
            }
          },
          py::arg("images") = py::none(), py::arg("graphs") = py::none(),
          "Predicted classes (hybrid rule for coupled models).");

  m.def(
      "train",
      [](const std::optional<Array>& images, const std::optional<std::vector<int>>& labels,
         const std::optional<std::vector<spx::SuperpixelGraph>>& graphs, const std::string& model, int epochs,
         int batch_size, double learning_rate, double weight_decay, double alpha, int patience, double val_fraction,
         std::uint64_t seed) {
        const DataArgs data(images, graphs, labels);
        spx::TrainConfig cfg;
        cfg.kind = spx::parse_model_kind(model);
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.optimizer.learning_rate = learning_rate;
        cfg.optimizer.weight_decay = weight_decay;
        cfg.alpha = alpha;
        cfg.patience = patience;
        cfg.val_fraction = val_fraction;
        cfg.seed = seed;
        spx::TrainResult result;
        {
          py::gil_scoped_release release;
          result = spx::train_model(data.view(), cfg);
        }
        return py::make_tuple(result.checkpoint, spx::report_to_jsonl(result.report));
      },
      py::arg("images") = py::none(), py::arg("labels") = py::none(), py::arg("graphs") = py::none(),
      py::arg("model") = "coupled", py::arg("epochs") = 30, py::arg("batch_size") = 128,
      py::arg("learning_rate") = 1e-3, py::arg("weight_decay") = 0.0, py::arg("alpha") = 0.75, py::arg("patience") = 5,
      py::arg("val_fraction") = 0.1, py::arg("seed") = 0,
      "Train a model; returns (best-validation Model, report as JSON lines).");
}
