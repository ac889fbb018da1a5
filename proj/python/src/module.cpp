#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <string>
#include <tuple>
#include <vector>

#include "rapnet/anchors.hpp"
#include "rapnet/error.hpp"
#include "rapnet/eval.hpp"
#include "rapnet/model.hpp"
#include "rapnet/pipeline.hpp"
#include "rapnet/postprocess.hpp"
#include "rapnet/segment.hpp"
#include "rapnet/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace rapnet;

namespace {

using Triple = std::tuple<double, double, double>;

std::vector<io::ProposalRecord> to_records(const std::vector<Triple>& items) {
  std::vector<io::ProposalRecord> out;
  for (const auto& [s, e, score] : items) {
    io::ProposalRecord r;
    r.segment = make_segment(s, e);
    r.set_stage(io::Stage::kRawConf, score);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Triple> to_triples(const std::vector<io::ProposalRecord>& records) {
  std::vector<Triple> out;
  for (const auto& r : records) out.emplace_back(r.segment.start, r.segment.end, r.score);
  return out;
}

pipeline::PipelineConfig config_from(const std::string& text) {
  return text.empty() ? pipeline::PipelineConfig{}
                      : pipeline::pipeline_config_from_json(nlohmann::json::parse(text));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Temporal action proposal pipeline";

  auto base = py::register_exception<Error>(m, "RapnetError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def(
      "segment_iou",
      [](std::pair<double, double> a, std::pair<double, double> b) {
        return segment_iou({a.first, a.second}, {b.first, b.second});
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "soft_nms",
      [](const std::vector<Triple>& proposals, double sigma, double score_floor,
         std::size_t max_kept) {
        post::NmsConfig cfg;
        cfg.sigma = sigma;
        cfg.score_floor = score_floor;
        cfg.max_kept = max_kept;
        return to_triples(post::soft_nms(to_records(proposals), cfg));
      },
      py::arg("proposals"), py::arg("sigma") = 0.5, py::arg("score_floor") = 1e-3,
      py::arg("max_kept") = 100);

  m.def(
      "kmeans_anchors",
      [](const std::vector<double>& widths, std::size_t k, std::uint64_t seed) {
        return anchors::kmeans_anchors(widths, k, seed);
      },
      py::arg("widths"), py::arg("k"), py::arg("seed") = 0);

  m.def(
      "oracle_actionness",
      [](const std::vector<std::pair<double, double>>& segments, std::size_t T) {
        std::vector<TemporalSegment> segs;
        for (const auto& [s, e] : segments) segs.push_back(make_segment(s, e));
        return io::oracle_actionness(segs, T);
      },
      py::arg("segments"), py::arg("T") = 128);

  m.def(
      "tag_regions",
      [](const std::vector<double>& actionness) {
        std::vector<std::pair<double, double>> out;
        for (const auto& r : post::tag_regions(actionness, {})) out.emplace_back(r.start, r.end);
        return out;
      },
      py::arg("actionness"));

  m.def(
      "snap_boundaries",
      [](const std::vector<Triple>& proposals, const std::vector<double>& actionness) {
        const post::TagConfig cfg;
        return to_triples(post::snap_boundaries(to_records(proposals),
                                                post::tag_regions(actionness, cfg), cfg));
      },
      py::arg("proposals"), py::arg("actionness"));

  m.def(
      "evaluate",
      [](const std::string& proposals_json, const std::string& annotations_path,
         const std::string& subset) {
        const auto ann = io::load_annotations(annotations_path).videos;
        const auto gts = eval::ground_truth_from(
            ann, subset == "all" ? std::nullopt : std::optional(io::parse_subset(subset)));
        const auto report =
            eval::evaluate(eval::restrict_to(io::proposals_from_json(proposals_json), gts), gts);
        return eval::to_json(report).dump();
      },
      py::arg("proposals_json"), py::arg("annotations_path"), py::arg("subset") = "validation");

  m.def(
      "default_config",
      [] { return pipeline::to_json(pipeline::PipelineConfig{}).dump(); },
      "Default pipeline config as JSON text");

  m.def(
      "generate_corpus",
      [](const fs::path& data_dir, const std::string& config_json) {
        const auto cfg = config_from(config_json);
        pipeline::write_corpus(io::generate_synthetic_corpus(cfg.synthetic), data_dir);
      },
      py::arg("data_dir"), py::arg("config_json") = "");

  m.def(
      "train",
      [](const fs::path& data_dir, const fs::path& run_dir, const std::string& config_json) {
        const auto cfg = config_from(config_json);
        py::gil_scoped_release release;
        const auto art = pipeline::train_from_disk(cfg, data_dir, run_dir);
        return std::make_pair(art.checkpoint, art.pem_checkpoint);
      },
      py::arg("data_dir"), py::arg("run_dir"), py::arg("config_json") = "");

  m.def(
      "infer",
      [](const fs::path& checkpoint, const fs::path& features) {
        const auto model = model::load_model(checkpoint);
        const auto out = pipeline::infer(model, pipeline::read_features(features));
        return std::make_pair(io::proposals_to_json(out.proposals), out.actionness);
      },
      py::arg("checkpoint"), py::arg("features"),
      "Raw proposals as JSON text and actionness curves per video");

  m.def(
      "grad_check",
      [](std::size_t T, std::size_t levels, std::size_t channels, std::uint64_t seed) {
        model::ModelConfig mc;
        mc.input_T = T;
        mc.input_D = 4;
        mc.levels = levels;
        mc.trunk_channels = channels;
        mc.seed = seed;
        io::SyntheticSpec spec;
        spec.num_videos = 1;
        spec.feature_dim = 4;
        spec.temporal_length = T;
        spec.duration_range = {0.2, 0.4};
        spec.seed = seed;
        const auto corpus = io::generate_synthetic_corpus(spec);
        std::vector<train::Example> batch;
        for (const auto& f : corpus.features)
          batch.push_back({f.video_id, f.values, corpus.annotations.at(f.video_id).segments});
        std::vector<std::vector<double>> widths(levels);
        for (std::size_t i = 0; i < levels; ++i)
          widths[i] = {0.05 + 0.2 * static_cast<double>(i), 0.15 + 0.2 * static_cast<double>(i)};
        return train::grad_check(mc, {widths}, batch).max_relative_error;
      },
      py::arg("T") = 16, py::arg("levels") = 2, py::arg("channels") = 4, py::arg("seed") = 0,
      "Max relative error of analytic vs finite-difference gradients");
}
