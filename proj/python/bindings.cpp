#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "objsearch/core.hpp"
#include "objsearch/encoder.hpp"
#include "objsearch/eval.hpp"
#include "objsearch/index.hpp"
#include "objsearch/pipeline.hpp"
#include "objsearch/preprocess.hpp"
#include "objsearch/retrieval.hpp"

namespace py = pybind11;
using namespace objsearch;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using IdArray = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;

EmbeddingVector to_embedding(const FloatArray& a) {
  if (a.ndim() != 1) throw InputError("embedding must be one-dimensional");
  return EmbeddingVector::from_raw(std::span<const float>(a.data(), a.size()));
}

py::array_t<float> to_numpy(const EmbeddingVector& v) {
  py::array_t<float> out(v.dim());
  std::copy(v.values().begin(), v.values().end(), out.mutable_data());
  return out;
}

PixelBuffer to_pixels(const ByteArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InputError("image must have shape (H, W, 3)");
  const auto h = static_cast<std::uint32_t>(a.shape(0));
  const auto w = static_cast<std::uint32_t>(a.shape(1));
  return PixelBuffer(w, h, std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

py::array_t<std::uint8_t> from_pixels(const PixelBuffer& p) {
  py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(p.height()),
                                  static_cast<py::ssize_t>(p.width()), py::ssize_t{3}});
  std::copy(p.data().begin(), p.data().end(), out.mutable_data());
  return out;
}

InstanceMap to_map(const IdArray& a) {
  if (a.ndim() != 2) throw InputError("instance map must have shape (H, W)");
  return InstanceMap(static_cast<std::uint32_t>(a.shape(1)), static_cast<std::uint32_t>(a.shape(0)),
                     std::vector<std::uint32_t>(a.data(), a.data() + a.size()));
}

py::tuple bbox_tuple(const BoundingBox& b) { return py::make_tuple(b.x, b.y, b.width, b.height); }

py::dict report_dict(const IngestReport& r) {
  py::dict d;
  d["added_images"] = r.added_images;
  d["skipped_duplicates"] = r.skipped_duplicates;
  d["added_objects"] = r.added_objects;
  d["warnings"] = r.warnings;
  d["messages"] = r.messages;
  return d;
}

py::list results_list(const std::vector<RankedResult>& rs) {
  py::list out;
  for (const auto& r : rs) {
    out.append(py::make_tuple(r.image_id, r.score,
                              r.best_object_index ? py::cast(*r.best_object_index) : py::none()));
  }
  return out;
}

// One image with its objects, as plain Python values. Each object is a dict
// with keys index, class, bbox (x, y, w, h), embedding and optionally
// confidence.
IngestItem make_item(const std::string& image_id, const std::string& content, const py::list& objects,
                     const std::optional<FloatArray>& full_embedding) {
  IngestItem item;
  item.image.image_id = image_id;
  item.image.source_uri = image_id;
  item.image.content_hash = ContentHash::of(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(content.data()), content.size()));
  if (full_embedding) item.image.full_image_embedding = to_embedding(*full_embedding);
  for (const auto& h : objects) {
    const auto o = h.cast<py::dict>();
    ObjectRecord rec;
    rec.image_id = image_id;
    rec.object_index = o["index"].cast<std::uint32_t>();
    rec.cls = ClassLabel(o["class"].cast<std::string>());
    const auto box = o["bbox"].cast<std::array<std::uint32_t, 4>>();
    rec.bbox = {box[0], box[1], box[2], box[3]};
    if (o.contains("confidence") && !o["confidence"].is_none()) {
      rec.confidence = o["confidence"].cast<float>();
    }
    rec.embedding = to_embedding(o["embedding"].cast<FloatArray>());
    item.objects.push_back(std::move(rec));
  }
  item.image.object_count = static_cast<std::uint32_t>(item.objects.size());
  return item;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Object-level image search core";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InvariantError>(m, "InvariantError", error.ptr());
  py::register_exception<InputError>(m, "InputError", error.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<QueryError>(m, "QueryError", error.ptr());
  py::register_exception<CapabilityError>(m, "CapabilityError", error.ptr());
  py::register_exception<TransportError>(m, "TransportError", error.ptr());
  auto format = py::register_exception<FormatError>(m, "FormatError", error.ptr());
  py::register_exception<CorruptionError>(m, "CorruptionError", format.ptr());
  py::register_exception<ChecksumError>(m, "ChecksumError", format.ptr());

  m.attr("DEFAULT_DIM") = kDefaultDim;

  m.def("normalize", [](const FloatArray& raw) { return to_numpy(to_embedding(raw)); },
        py::arg("raw"), "Unit-normalize a vector.");
  m.def("cosine_similarity",
        [](const FloatArray& a, const FloatArray& b) {
          return cosine_similarity(to_embedding(a), to_embedding(b));
        },
        py::arg("a"), py::arg("b"));

  py::class_<ToyEncoder>(m, "ToyEncoder")
      .def(py::init<std::uint32_t>(), py::arg("dim") = kDefaultDim)
      .def_property_readonly("dim", [](const ToyEncoder& e) { return e.descriptor().dim; })
      .def_property_readonly("encoder_id",
                             [](const ToyEncoder& e) { return e.descriptor().encoder_id; })
      .def("encode_text", [](const ToyEncoder& e, const std::string& t) { return to_numpy(e.encode_text(t)); })
      .def("encode_tokens",
           [](const ToyEncoder& e, std::vector<std::string> tokens) {
             return to_numpy(e.encode_tokens(std::move(tokens)));
           })
      .def("encode_image",
           [](const ToyEncoder& e, const ByteArray& img) { return to_numpy(e.encode_image(to_pixels(img))); })
      .def_static("tokenize", &ToyEncoder::tokenize);

  m.def("apply_mask",
        [](const ByteArray& img, const IdArray& map, std::uint32_t id) {
          return from_pixels(apply_mask(to_pixels(img), to_map(map), id));
        },
        py::arg("image"), py::arg("instance_map"), py::arg("instance_id"));
  m.def("tight_bbox",
        [](const IdArray& map, std::uint32_t id) { return bbox_tuple(tight_bbox(to_map(map), id)); },
        py::arg("instance_map"), py::arg("instance_id"));
  m.def("crop",
        [](const ByteArray& img, std::array<std::uint32_t, 4> b) {
          return from_pixels(crop(to_pixels(img), BoundingBox{b[0], b[1], b[2], b[3]}));
        },
        py::arg("image"), py::arg("bbox"));
  m.def("pad_to_square", [](const ByteArray& img) { return from_pixels(pad_to_square(to_pixels(img))); },
        py::arg("image"));

  py::class_<Index>(m, "Index")
      .def(py::init([](const std::string& encoder_id, std::uint32_t dim, std::vector<std::string> classes) {
             std::vector<ClassLabel> labels;
             for (auto& c : classes) labels.emplace_back(std::move(c));
             return Index(EncoderDescriptor{encoder_id, dim, Modality::both}, ClassSet(std::move(labels)));
           }),
           py::arg("encoder_id"), py::arg("dim"), py::arg("classes"))
      .def_static("load", &Index::load, py::arg("path"))
      .def("persist", &Index::persist, py::arg("path"))
      .def("add_image",
           [](Index& index, const std::string& image_id, const py::bytes& content, const py::list& objects,
              const std::optional<FloatArray>& full_embedding) {
             std::vector<IngestItem> items;
             items.push_back(make_item(image_id, content, objects, full_embedding));
             return report_dict(index.ingest(items));
           },
           py::arg("image_id"), py::arg("content"), py::arg("objects"), py::arg("full_embedding") = py::none())
      .def("search_images",
           [](const Index& index, const std::string& cls, const FloatArray& q, std::size_t k) {
             return results_list(index.search_topk_images(ClassLabel(cls), to_embedding(q), k));
           },
           py::arg("cls"), py::arg("query"), py::arg("k"))
      .def("search_objects",
           [](const Index& index, const std::string& cls, const FloatArray& q, std::size_t k) {
             py::list out;
             for (const auto& s : index.search_topk_objects(ClassLabel(cls), to_embedding(q), k)) {
               out.append(py::make_tuple(s.image_id, s.object_index, s.score));
             }
             return out;
           },
           py::arg("cls"), py::arg("query"), py::arg("k"))
      .def("search_full_images",
           [](const Index& index, const FloatArray& q, std::size_t k) {
             return results_list(index.search_topk_full_images(to_embedding(q), k));
           },
           py::arg("query"), py::arg("k"))
      .def("stats", [](const Index& index) {
        const auto s = index.stats();
        py::dict d, classes;
        for (const auto& p : s.classes) classes[py::str(p.cls.name())] = p.rows;
        d["classes"] = classes;
        d["image_count"] = s.image_count;
        d["object_count"] = s.object_count;
        d["full_image_count"] = s.full_image_count;
        d["dim"] = s.dim;
        d["encoder_id"] = s.encoder_id;
        return d;
      });

  m.def("ingest_directory",
        [](Index& index, const std::string& images, const std::string& annotations, const std::string& encoder,
           bool with_full_image, unsigned workers) {
          const auto enc = make_encoder(encoder, index.encoder().dim);
          const EncoderEmbedder embedder(*enc);
          PipelineReport r;
          {
            py::gil_scoped_release release;
            r = ingest_directory(index, embedder, PipelineOptions{images, annotations, with_full_image, workers});
          }
          auto d = report_dict(r.ingest);
          d["images_seen"] = r.images_seen;
          d["images_processed"] = r.images_processed;
          d["skipped_empty_masks"] = r.skipped_empty_masks;
          return d;
        },
        py::arg("index"), py::arg("images_dir"), py::arg("annotations_dir"), py::arg("encoder") = "toy",
        py::arg("with_full_image") = false, py::arg("workers") = 1);

  m.def("run_query",
        [](const Index& index, const std::string& cls, const std::string& text, std::size_t k,
           const std::string& mode, const std::string& encoder) {
          const auto enc = make_encoder(encoder, index.encoder().dim);
          const Retriever retriever(index, *enc);
          const auto r = retriever.run_query(Query::make(ClassLabel(cls), text), k, search_mode_from_string(mode));
          return py::make_tuple(results_list(r.results), r.exhausted);
        },
        py::arg("index"), py::arg("cls"), py::arg("text"), py::arg("k") = 10, py::arg("mode") = "object",
        py::arg("encoder") = "toy", "Returns (results, exhausted).");

  m.def("cumulative_tp_curve",
        [](const std::vector<std::string>& ranked, const std::map<std::string, std::string>& verdicts,
           std::size_t n) {
          eval::VerdictMap vm;
          for (const auto& [id, v] : verdicts) vm[id] = eval::verdict_from_string(v);
          return eval::cumulative_tp_curve(ranked, vm, n);
        },
        py::arg("ranked"), py::arg("verdicts"), py::arg("n"));
  m.def("compare_methods",
        [](const std::vector<std::map<std::string, std::vector<std::uint32_t>>>& queries,
           const std::string& reference) {
          std::vector<eval::CurveSet> sets;
          for (const auto& q : queries) sets.emplace_back(q.begin(), q.end());
          py::dict out;
          for (const auto& mc : eval::compare_methods(sets, reference).methods) {
            py::dict d;
            d["deltas"] = mc.deltas;
            d["final_deltas"] = mc.final_deltas;
            d["mean_final_difference"] = mc.mean_final_difference;
            out[py::str(mc.method)] = d;
          }
          return out;
        },
        py::arg("queries"), py::arg("reference"));
  m.def("zero_shot_classify",
        [](const FloatArray& items, const std::vector<std::string>& labels, const std::string& pattern,
           std::vector<std::size_t> truth, const std::string& encoder) {
          if (items.ndim() != 2) throw InputError("items must have shape (N, d)");
          const auto d = static_cast<std::uint32_t>(items.shape(1));
          std::vector<EmbeddingVector> vs;
          for (py::ssize_t i = 0; i < items.shape(0); ++i) {
            vs.push_back(EmbeddingVector::from_raw(std::span<const float>(items.data(i, 0), d)));
          }
          const auto enc = make_encoder(encoder, d);
          const auto r = eval::zero_shot_classify(vs, labels, eval::PromptTemplate(pattern), *enc, truth);
          return py::make_tuple(r.assigned, r.accuracy);
        },
        py::arg("items"), py::arg("labels"), py::arg("template") = "{label}",
        py::arg("truth") = std::vector<std::size_t>{}, py::arg("encoder") = "toy",
        "Returns (assigned label indices, accuracy or None).");
  m.def("query_id", &eval::query_id, py::arg("cls"), py::arg("text"), py::arg("mode") = "object");
}
