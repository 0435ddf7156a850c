#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "meddiff/analysis.hpp"
#include "meddiff/corpus.hpp"
#include "meddiff/diffusion.hpp"
#include "meddiff/error.hpp"
#include "meddiff/metrics.hpp"
#include "meddiff/model.hpp"
#include "meddiff/trainer.hpp"

namespace py = pybind11;
using namespace meddiff;

namespace {

py::dict report_to_dict(const MetricsReport& report) {
    py::dict out;
    out["pr_auc"] = report.pr_auc;
    out["f1"] = report.f1;
    out["kappa"] = report.kappa;
    out["n_samples"] = report.n_samples;
    out["threshold"] = report.threshold;
    return out;
}

}  // namespace

PYBIND11_MODULE(_meddiff, m) {
    m.doc() = "EHR risk prediction with diffusion-based sequence augmentation";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

    py::class_<Visit>(m, "Visit")
        .def(py::init<>())
        .def_readwrite("codes", &Visit::codes)
        .def_readwrite("day", &Visit::day);

    py::class_<PatientRecord>(m, "PatientRecord")
        .def(py::init<>())
        .def_readwrite("visits", &PatientRecord::visits)
        .def_readwrite("label", &PatientRecord::label);

    py::class_<Cohort>(m, "Cohort")
        .def(py::init<>())
        .def_readwrite("records", &Cohort::records)
        .def_readwrite("vocab_size", &Cohort::vocab_size)
        .def("__len__", [](const Cohort& c) { return c.records.size(); });

    m.def("parse_corpus", &parse_corpus, py::arg("text"));
    m.def("serialize_corpus", &serialize_corpus, py::arg("cohort"));
    m.def("load_corpus", &load_corpus, py::arg("path"));
    m.def("save_corpus", &save_corpus, py::arg("cohort"), py::arg("path"));
    m.def(
        "generate_cohort",
        [](const KvMap& spec_kv, std::uint64_t seed) {
            return generate_cohort(cohort_spec_from_kv(spec_kv), seed);
        },
        py::arg("spec"), py::arg("seed"));
    m.def(
        "split_cohort",
        [](const Cohort& cohort, double train, double val, double test, std::uint64_t seed) {
            const CohortSplit split = split_cohort(cohort, {train, val, test}, seed);
            return py::make_tuple(split.train, split.val, split.test);
        },
        py::arg("cohort"), py::arg("train"), py::arg("val"), py::arg("test"), py::arg("seed"));

    m.def("pr_auc", &pr_auc, py::arg("scores"), py::arg("labels"));
    m.def("f1", &f1, py::arg("predictions"), py::arg("labels"));
    m.def("cohen_kappa", &cohen_kappa, py::arg("predictions"), py::arg("labels"));

    py::class_<DiffusionSchedule>(m, "DiffusionSchedule")
        .def_readonly("N", &DiffusionSchedule::N)
        .def_readonly("beta", &DiffusionSchedule::beta)
        .def_readonly("alpha", &DiffusionSchedule::alpha)
        .def_readonly("alpha_bar", &DiffusionSchedule::alpha_bar);

    m.def("build_schedule", &build_schedule, py::arg("N"), py::arg("beta_start"), py::arg("beta_end"));
    m.def("forward_noise", &forward_noise, py::arg("x0"), py::arg("n"), py::arg("schedule"),
          py::arg("eps"));
    m.def("posterior_variance", &posterior_variance, py::arg("schedule"), py::arg("n"));
    m.def("step_encoding", &step_encoding, py::arg("n"), py::arg("d_s"));

    m.def(
        "train_and_evaluate",
        [](const KvMap& config_kv, const Cohort& cohort) {
            const TrainConfig config = train_config_from_kv(config_kv);
            return report_to_dict(run_ablation(config.ablation_mode, config, cohort));
        },
        py::arg("config"), py::arg("cohort"),
        "Split, train, and score the test part; returns the metric report.");

    m.def(
        "gradient_check_micro",
        [](std::uint64_t seed, double tolerance) {
            TrainConfig config;
            config.d_e = 8;
            config.d_h = 8;
            config.d_f = 4;
            config.d_b = 4;
            config.d_s = 4;
            config.diffusion_steps = 4;
            config.seed = seed;
            const ModelDims dims{6, 8, 8, 4, 4, 4};
            PatientRecord a;
            a.label = 1;
            a.visits = {{{0, 2}, 0}, {{1, 3}, 40}};
            PatientRecord b;
            b.label = 0;
            b.visits = {{{5}, 15}};
            const GradCheckReport report = gradient_check(dims, {a, b}, config, tolerance);
            py::dict out;
            out["max_rel_error"] = report.max_rel_error;
            out["passed"] = report.passed;
            return out;
        },
        py::arg("seed") = 0, py::arg("tolerance") = 1e-3);
}
