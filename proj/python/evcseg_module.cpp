// Python bindings. Volumes cross as Fortran-ordered arrays indexed [x, y, z],
// which share the library's x-fastest layout.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "evcseg/crf.hpp"
#include "evcseg/metrics.hpp"
#include "evcseg/nifti_io.hpp"
#include "evcseg/phantom.hpp"
#include "evcseg/pipeline.hpp"
#include "evcseg/postproc.hpp"

namespace py = pybind11;
using namespace evcseg;

namespace {

template <typename T>
using FArray = py::array_t<T, py::array::f_style | py::array::forcecast>;

Affine to_affine(const std::optional<FArray<double>>& a) {
  if (!a) return Affine::Identity();
  if (a->ndim() != 2 || a->shape(0) != 4 || a->shape(1) != 4) throw ShapeError("affine must be 4x4");
  Affine m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = a->at(r, c);
  return m;
}

py::array_t<double> from_affine(const Affine& a) {
  py::array_t<double> out({4, 4});
  auto m = out.mutable_unchecked<2>();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = a(r, c);
  return out;
}

Shape3 shape_of(const py::array& a) {
  if (a.ndim() != 3) throw ShapeError("expected a 3D array indexed [x, y, z]");
  return {static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2))};
}

template <typename T>
Grid3<T> to_grid(const FArray<T>& a, const Affine& affine) {
  Grid3<T> g(shape_of(a), affine);
  std::copy(a.data(), a.data() + a.size(), g.data().begin());
  return g;
}

template <typename T>
py::array_t<T> from_grid(const Grid3<T>& g) {
  const Shape3 s = g.shape();
  py::array_t<T, py::array::f_style> out({s.nx, s.ny, s.nz});
  std::copy(g.data().begin(), g.data().end(), out.mutable_data());
  return out;
}

// (labels, x, y, z) <-> label-major planes.
ProbMap to_probmap(const FArray<double>& a, const Affine& affine) {
  if (a.ndim() != 4) throw ShapeError("expected probabilities indexed [label, x, y, z]");
  const Shape3 s{static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3))};
  ProbMap p(static_cast<int>(a.shape(0)), s, affine);
  auto v = a.unchecked<4>();
  for (int l = 0; l < p.labels(); ++l) {
    std::size_t i = 0;
    for (int z = 0; z < s.nz; ++z)
      for (int y = 0; y < s.ny; ++y)
        for (int x = 0; x < s.nx; ++x) p.at(l, i++) = v(l, x, y, z);
  }
  return p;
}

void apply_settings(PipelineConfig& cfg, const std::map<std::string, std::string>& settings) {
  for (const auto& [k, v] : settings) apply_setting(cfg, k, v);
}

CrfConfig crf_config(const std::map<std::string, std::string>& settings) {
  PipelineConfig cfg;
  apply_settings(cfg, settings);
  return cfg.crf;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "EVC-Net brain extraction core";

  // Library errors become Python exceptions by family.
  static py::exception<Error> base(m, "EvcsegError");
  static py::exception<Error> config(m, "ConfigError", base.ptr());
  static py::exception<Error> data(m, "DataError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const std::string msg = e.kind() + ": " + e.what();
      if (e.kind() == "config") config(msg.c_str());
      else if (e.kind() == "training" || e.kind() == "domain" || e.kind() == "capacity") base(msg.c_str());
      else data(msg.c_str());
    }
  });

  m.def(
      "read_nifti",
      [](const std::filesystem::path& path) {
        const Volume v = read_nifti(path);
        return py::make_tuple(from_grid(v), from_affine(v.affine()));
      },
      py::arg("path"), "Returns (volume[x, y, z], affine).");
  m.def(
      "read_mask",
      [](const std::filesystem::path& path) {
        const LabelMask v = read_nifti_mask(path);
        return py::make_tuple(from_grid(v), from_affine(v.affine()));
      },
      py::arg("path"));
  m.def(
      "write_nifti",
      [](const std::filesystem::path& path, const FArray<double>& volume,
         const std::optional<FArray<double>>& affine) { write_nifti(to_grid(volume, to_affine(affine)), path); },
      py::arg("path"), py::arg("volume"), py::arg("affine") = py::none());
  m.def(
      "write_mask",
      [](const std::filesystem::path& path, const FArray<std::uint8_t>& mask,
         const std::optional<FArray<double>>& affine) { write_nifti(to_grid(mask, to_affine(affine)), path); },
      py::arg("path"), py::arg("mask"), py::arg("affine") = py::none());

  m.def(
      "dice", [](const FArray<std::uint8_t>& a, const FArray<std::uint8_t>& b) {
        return dice(to_grid(a, Affine::Identity()), to_grid(b, Affine::Identity()));
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "jaccard", [](const FArray<std::uint8_t>& a, const FArray<std::uint8_t>& b) {
        return jaccard(to_grid(a, Affine::Identity()), to_grid(b, Affine::Identity()));
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "balanced_ahd",
      [](const FArray<std::uint8_t>& truth, const FArray<std::uint8_t>& pred, const std::optional<FArray<double>>& affine) {
        const Affine a = to_affine(affine);
        return balanced_ahd(to_grid(truth, a), to_grid(pred, a), affine.has_value());
      },
      py::arg("truth"), py::arg("pred"), py::arg("affine") = py::none(),
      "In voxels, or in mm when an affine is given. inf for an empty prediction.");
  m.def(
      "edt", [](const FArray<std::uint8_t>& mask) { return from_grid(edt(to_grid(mask, Affine::Identity()))); },
      py::arg("mask"));

  m.def(
      "cleanup",
      [](const FArray<std::uint8_t>& mask) {
        const Cleaned c = cleanup(to_grid(mask, Affine::Identity()));
        return py::make_tuple(from_grid(c.mask), c.empty_foreground);
      },
      py::arg("mask"), "Hole filling then largest component. Returns (mask, empty_foreground).");

  m.def(
      "refine",
      [](const FArray<double>& probs, const FArray<double>& image, const std::optional<FArray<double>>& affine,
         const std::map<std::string, std::string>& settings) {
        const Affine a = to_affine(affine);
        const RefineResult r = refine(to_probmap(probs, a), to_grid(image, a), crf_config(settings));
        return py::make_tuple(from_grid(r.labels), r.state.free_energy_trace);
      },
      py::arg("probs"), py::arg("image"), py::arg("affine") = py::none(),
      py::arg("settings") = std::map<std::string, std::string>{},
      "Dense CRF on probs[label, x, y, z]. Settings use the crf.* keys. Returns (labels, free_energy_trace).");

  m.def(
      "normalize_intensity",
      [](const FArray<double>& v) { return from_grid(normalize_intensity(to_grid(v, Affine::Identity()))); },
      py::arg("volume"));

  m.def(
      "make_phantom",
      [](int size, std::uint64_t seed, double extent_mm, bool spherical, bool lps_affine) {
        PhantomOptions o;
        o.extent_mm = extent_mm;
        o.spherical = spherical;
        o.lps_affine = lps_affine;
        const PhantomCase c = make_phantom(size, seed, o);
        return py::make_tuple(from_grid(c.image), from_grid(c.mask), from_affine(c.image.affine()));
      },
      py::arg("size"), py::arg("seed"), py::arg("extent_mm") = 60.0, py::arg("spherical") = false,
      py::arg("lps_affine") = true, "Returns (image, mask, affine).");
  m.def(
      "synth",
      [](int n, int size, std::uint64_t seed, const std::filesystem::path& out) { synth(n, size, seed, out); },
      py::arg("n"), py::arg("size"), py::arg("seed"), py::arg("out_dir"));

  m.def(
      "train",
      [](const std::filesystem::path& data, const std::filesystem::path& checkpoint, const std::filesystem::path& log,
         const std::map<std::string, std::string>& settings) {
        PipelineConfig cfg;
        apply_settings(cfg, settings);
        TrainResult r;
        {
          py::gil_scoped_release nogil;
          r = train(data, checkpoint, log, cfg);
        }
        std::vector<double> losses;
        for (const auto& e : r.log) losses.push_back(e.train_loss);
        return losses;
      },
      py::arg("data_dir"), py::arg("checkpoint"), py::arg("log"),
      py::arg("settings") = std::map<std::string, std::string>{}, "Returns the per-epoch training loss.");
  m.def(
      "extract",
      [](const std::filesystem::path& input, const std::filesystem::path& output,
         const std::filesystem::path& checkpoint, const std::map<std::string, std::string>& settings) {
        PipelineConfig cfg;
        apply_settings(cfg, settings);
        py::gil_scoped_release nogil;
        extract(input, output, checkpoint, cfg);
      },
      py::arg("input"), py::arg("output"), py::arg("checkpoint"),
      py::arg("settings") = std::map<std::string, std::string>{});
  m.def(
      "evaluate",
      [](const std::filesystem::path& pred, const std::filesystem::path& truth, bool mm) {
        const EvalReport r = evaluate(pred, truth, mm);
        py::list cases;
        for (const auto& c : r.cases) {
          py::dict d;
          d["case"] = c.name;
          d["dice"] = c.dice;
          d["jaccard"] = c.jaccard;
          d["balanced_ahd"] = c.balanced_ahd;
          d["voxels_truth"] = c.voxels_truth;
          d["voxels_pred"] = c.voxels_pred;
          cases.append(d);
        }
        py::dict summary;
        for (const auto& [k, s] : r.summary) summary[py::str(k)] = py::make_tuple(s.mean, s.std, s.n);
        return py::make_tuple(cases, summary);
      },
      py::arg("pred_dir"), py::arg("truth_dir"), py::arg("mm") = false,
      "Returns (cases, summary) with summary[metric] = (mean, std, n).");
}
