#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "unlearnkit/attack.hpp"
#include "unlearnkit/cli.hpp"
#include "unlearnkit/dataset.hpp"
#include "unlearnkit/errors.hpp"
#include "unlearnkit/eval.hpp"
#include "unlearnkit/importance.hpp"
#include "unlearnkit/model.hpp"
#include "unlearnkit/unlearn.hpp"

namespace py = pybind11;
using namespace unlearnkit;

namespace {

// Python dicts cross the boundary as JSON text.
nlohmann::json to_json(const py::object& obj) {
    if (obj.is_none()) return nlohmann::json::object();
    const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
    return nlohmann::json::parse(text);
}

py::object from_json(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

py::array_t<float> dataset_inputs(const Dataset& ds) {
    std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(ds.size())};
    for (auto d : ds.shape) shape.push_back(static_cast<py::ssize_t>(d));
    py::array_t<float> out(shape);
    std::copy(ds.inputs.begin(), ds.inputs.end(), out.mutable_data());
    return out;
}

Dataset dataset_from_arrays(py::array_t<float, py::array::c_style | py::array::forcecast> inputs,
                            std::vector<int> labels, std::size_t num_classes, std::optional<std::vector<InstanceId>> ids,
                            bool image) {
    if (inputs.ndim() < 2) throw ArgumentError("inputs need a leading example axis");
    Dataset ds;
    for (py::ssize_t d = 1; d < inputs.ndim(); ++d) ds.shape.push_back(static_cast<std::size_t>(inputs.shape(d)));
    ds.num_classes = num_classes;
    ds.image = image;
    ds.inputs.assign(inputs.data(), inputs.data() + inputs.size());
    ds.labels = std::move(labels);
    if (ids) {
        ds.ids = std::move(*ids);
    } else {
        ds.ids.resize(ds.labels.size());
        for (std::size_t i = 0; i < ds.ids.size(); ++i) ds.ids[i] = static_cast<InstanceId>(i);
    }
    ds.validate();
    return ds;
}

Matrix<float> to_batch(const ClassifierState& s, py::array_t<float, py::array::c_style | py::array::forcecast> x) {
    const auto d = static_cast<py::ssize_t>(s.arch.input_dim());
    if (x.size() % d != 0) throw ContractError("batch does not match the model input shape");
    Matrix<float> m(x.size() / d, d);
    std::copy(x.data(), x.data() + x.size(), m.data());
    return m;
}

py::dict result_dict(const UnlearnResult& r) {
    py::dict d = from_json(unlearn_result_summary(r));
    py::list trace;
    for (const auto& rec : r.trace) trace.append(from_json(epoch_record_to_json(rec)));
    d["trace"] = trace;
    d["state"] = r.state;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Instance-wise machine unlearning toolkit";

    // Later registrations are tried first, so the subclasses shadow the base.
    auto& base = py::register_exception<Error>(m, "Error");
    py::register_exception<ArgumentError>(m, "ArgumentError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());
    py::register_exception<ManifestError>(m, "ManifestError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());

    py::class_<Dataset>(m, "Dataset")
        .def(py::init(&dataset_from_arrays), py::arg("inputs"), py::arg("labels"), py::arg("num_classes"),
             py::arg("ids") = py::none(), py::arg("image") = false)
        .def_property_readonly("inputs", &dataset_inputs)
        .def_readonly("labels", &Dataset::labels)
        .def_readonly("ids", &Dataset::ids)
        .def_readonly("num_classes", &Dataset::num_classes)
        .def_readonly("shape", &Dataset::shape)
        .def_readonly("image", &Dataset::image)
        .def("__len__", &Dataset::size)
        .def("save", [](const Dataset& ds, const std::filesystem::path& dir) { save_dataset(dir, ds); })
        .def_static("load", &load_dataset);

    py::class_<ForgetManifest>(m, "ForgetManifest")
        .def_readonly("ids", &ForgetManifest::ids)
        .def_property_readonly("mode", [](const ForgetManifest& f) { return to_string(f.mode); })
        .def_readonly("relabel_targets", &ForgetManifest::relabel_targets)
        .def_readonly("seed", &ForgetManifest::seed)
        .def("__len__", &ForgetManifest::size)
        .def("to_dict", [](const ForgetManifest& f) { return from_json(manifest_to_json(f)); })
        .def_static("from_dict", [](const py::object& d) { return manifest_from_json(to_json(d)); })
        .def("save", [](const ForgetManifest& f, const std::filesystem::path& p) { save_manifest(p, f); })
        .def_static("load", &load_manifest);

    py::class_<ClassifierState>(m, "ClassifierState")
        .def_property_readonly("arch", [](const ClassifierState& s) { return s.arch.name; })
        .def_property_readonly("num_classes", &ClassifierState::num_classes)
        .def_property_readonly("num_parameters", [](const ClassifierState& s) { return s.params.count(); })
        .def_property_readonly("metadata", [](const ClassifierState& s) { return from_json(s.metadata); })
        .def("save", [](const ClassifierState& s, const std::filesystem::path& p) { save_checkpoint(p, s); })
        .def_static("load", &load_checkpoint);

    py::class_<AdversarialSet>(m, "AdversarialSet")
        .def("__len__", &AdversarialSet::size)
        .def_property_readonly("targets", [](const AdversarialSet& s) {
            std::vector<int> t;
            for (const auto& r : s.records) t.push_back(r.target);
            return t;
        })
        .def_property_readonly("source_ids", [](const AdversarialSet& s) {
            std::vector<InstanceId> t;
            for (const auto& r : s.records) t.push_back(r.source_id);
            return t;
        })
        .def("as_dataset", &adversarial_dataset)
        .def("save", [](const AdversarialSet& s, const std::filesystem::path& p) { save_adversarial_set(p, s); })
        .def_static("load", &load_adversarial_set);

    py::class_<ImportanceMap>(m, "ImportanceMap")
        .def_property_readonly("kind", [](const ImportanceMap& o) { return to_string(o.kind); })
        .def("normalized", &normalize_layerwise)
        .def("inverted", &invert)
        .def("arrays", [](const ImportanceMap& o) {
            py::dict out;
            o.values.for_each([&](std::size_t l, const ParamArray<double>& a) {
                out[py::str(std::to_string(l) + "/" + a.name)] = py::array_t<double>(
                    static_cast<py::ssize_t>(a.values.size()), a.values.data());
            });
            return out;
        })
        .def("save", [](const ImportanceMap& o, const std::filesystem::path& p) { save_importance(p, o); })
        .def_static("load", &load_importance);

    m.def("make_synthetic", &make_synthetic, py::arg("num_classes"), py::arg("per_class"), py::arg("dim"),
          py::arg("spread"), py::arg("seed"));
    m.def(
        "make_synthetic_images",
        [](std::size_t num_classes, std::size_t per_class, std::uint64_t seed, std::uint64_t template_seed,
           InstanceId first_id) {
            SyntheticImageConfig c;
            c.num_classes = num_classes;
            c.per_class = per_class;
            c.template_seed = template_seed;
            c.first_id = first_id;
            return make_synthetic_images(c, seed);
        },
        py::arg("num_classes") = 10, py::arg("per_class") = 500, py::arg("seed") = 0, py::arg("template_seed") = 0,
        py::arg("first_id") = 0);
    m.def(
        "select_forget_set",
        [](const Dataset& ds, std::size_t k, const std::string& mode, std::uint64_t seed) {
            return select_forget_set(ds, k, forget_mode_from_string(mode), seed);
        },
        py::arg("ds"), py::arg("k"), py::arg("mode") = "misclassify", py::arg("seed") = 0);
    m.def("split_remaining", &split_remaining, py::arg("ds"), py::arg("manifest"));

    m.def(
        "init_state",
        [](const std::string& arch, const Dataset& ds, std::uint64_t seed) {
            return init_state(make_architecture(arch, ds.shape, ds.num_classes), seed);
        },
        py::arg("arch"), py::arg("ds"), py::arg("seed") = 0);
    m.def(
        "pretrain",
        [](const ClassifierState& s0, const Dataset& ds, const py::object& cfg) {
            const auto c = optim_config_from_json(to_json(cfg));
            PretrainResult r;
            {
                py::gil_scoped_release release;
                r = pretrain(s0, ds, c);
            }
            return py::make_tuple(r.state, r.train_accuracy);
        },
        py::arg("state"), py::arg("ds"), py::arg("config") = py::none());
    m.def(
        "forward", [](const ClassifierState& s, py::array_t<float, py::array::c_style | py::array::forcecast> x) {
            return Eigen::MatrixXf(forward(s, to_batch(s, x)));
        });
    m.def("predict", &predict);
    m.def("accuracy", py::overload_cast<const ClassifierState&, const Dataset&>(&accuracy));

    m.def(
        "pgd_l2_targeted",
        [](const ClassifierState& s, std::vector<float> x, int target, const py::object& cfg) {
            return pgd_l2_targeted(s, x, target, attack_config_from_json(to_json(cfg)));
        },
        py::arg("state"), py::arg("x"), py::arg("target"), py::arg("config") = py::none());
    m.def(
        "generate_adversarial_set",
        [](const ClassifierState& s, const Dataset& forget, std::size_t n_adv, const py::object& cfg,
           const std::string& policy) {
            return generate_adversarial_set(s, forget, n_adv, attack_config_from_json(to_json(cfg)),
                                            target_policy_from_string(policy));
        },
        py::arg("state"), py::arg("forget"), py::arg("n_adv") = 20, py::arg("config") = py::none(),
        py::arg("target_policy") = "per_image");

    m.def(
        "mas_importance",
        [](const ClassifierState& s, const Dataset& ds, const std::string& on) {
            return mas_importance(s, ds, importance_on_from_string(on));
        },
        py::arg("state"), py::arg("ds"), py::arg("on") = "logits");

    m.def(
        "run_unlearning",
        [](const ClassifierState& s0, const Dataset& forget, const ForgetManifest& manifest, const py::object& cfg,
           const Dataset* remain, const Dataset* test) {
            const auto c = unlearn_config_from_json(to_json(cfg));
            Monitor mon{remain, test};
            UnlearnResult r;
            {
                py::gil_scoped_release release;
                if (c.method == Method::rawp)
                    r = run_rawp(s0, forget, c, mon);
                else if (c.method == Method::oracle)
                    r = run_oracle(s0, forget, remain ? *remain : Dataset{}, manifest, c, mon);
                else
                    r = run_unlearning(s0, forget, manifest, c, {}, mon);
            }
            return result_dict(r);
        },
        py::arg("state"), py::arg("forget"), py::arg("manifest"), py::arg("config") = py::none(),
        py::arg("remain") = nullptr, py::arg("test") = nullptr);

    m.def("cka_linear", &cka_linear, py::arg("x"), py::arg("y"));
    m.def("layerwise_cka", &layerwise_cka, py::arg("before"), py::arg("after"), py::arg("ds"),
          py::arg("max_examples") = 512);
    m.def("confusion_prepost", &confusion_prepost);
    m.def(
        "evaluate",
        [](const ClassifierState& before, const ClassifierState& after, const Dataset& forget, const Dataset& remain,
           const Dataset& test, const ForgetManifest& manifest, std::size_t max_examples) {
            return from_json(report_to_json(
                evaluate(before, after, forget, remain, test, manifest, EvalOptions{max_examples, true, true})));
        },
        py::arg("before"), py::arg("after"), py::arg("forget"), py::arg("remain"), py::arg("test"),
        py::arg("manifest"), py::arg("max_examples") = 512);

    m.def(
        "cli", [](const std::vector<std::string>& args) { return run_cli(args); }, py::arg("args"),
        "Runs a command-line subcommand in process and returns its exit code.");
}
