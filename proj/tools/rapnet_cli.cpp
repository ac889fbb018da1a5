#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rapnet/error.hpp"
#include "rapnet/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rapnet;

constexpr int kUsageExit = 2;
constexpr int kRuntimeExit = 1;

void log(const std::string& msg) { std::fprintf(stderr, "[rapnet] %s\n", msg.c_str()); }

void summary(json j) { std::cout << j.dump() << std::endl; }

pipeline::PipelineConfig load_config(const std::string& path) {
  return path.empty() ? pipeline::PipelineConfig{} : pipeline::load_pipeline_config(path);
}

std::optional<io::Subset> subset_arg(const std::string& s) {
  if (s.empty() || s == "all") return std::nullopt;
  return io::parse_subset(s);
}

struct Options {
  std::string config;
  std::size_t threads = 0;

  // gen-data
  std::string out;
  std::optional<std::size_t> num_videos;
  std::optional<std::uint64_t> seed;
  std::optional<double> noise;

  // cluster-anchors
  std::size_t k = 12;
  std::size_t levels = 6;
  std::string annotations;

  // train
  std::string data;
  std::optional<int> epochs;

  // infer
  std::string checkpoint;
  std::string features;

  // postprocess
  std::string proposals;
  std::string actionness;
  std::string pem;
  bool no_pem = false;
  bool tag = false;
  bool no_tag = false;
  std::optional<double> nms_sigma;
  std::string oracle_gt;

  // ensemble
  std::vector<std::string> inputs;

  // eval
  std::string gt;
  std::string subset;
};

int cmd_gen_data(const Options& o) {
  auto cfg = load_config(o.config);
  if (o.num_videos) cfg.synthetic.num_videos = *o.num_videos;
  if (o.seed) cfg.synthetic.seed = *o.seed;
  if (o.noise) cfg.synthetic.actionness_noise_sigma = *o.noise;
  cfg.synthetic.validate();
  const fs::path out = o.out.empty() ? fs::path(cfg.paths.data_dir) : fs::path(o.out);
  log("generating " + std::to_string(cfg.synthetic.num_videos) + " videos into " + out.string());
  const auto corpus = io::generate_synthetic_corpus(cfg.synthetic);
  pipeline::write_corpus(corpus, out);
  pipeline::echo_config(pipeline::to_json(cfg), out);
  std::size_t segments = 0;
  for (const auto& [_, a] : corpus.annotations) segments += a.segments.size();
  summary({{"command", "gen-data"},
           {"videos", corpus.annotations.size()},
           {"segments", segments},
           {"out", out.string()}});
  return 0;
}

int cmd_cluster_anchors(const Options& o) {
  auto cfg = load_config(o.config);
  const fs::path ann = o.annotations.empty() ? pipeline::annotations_path(cfg.paths.data_dir)
                                             : fs::path(o.annotations);
  const auto videos = io::load_annotations(ann).videos;
  pipeline::AnchorConfig ac = cfg.anchors;
  ac.k = o.k;
  if (o.seed) ac.seed = *o.seed;
  if (o.k % o.levels != 0) {
    throw ConfigError("--k must be divisible by --levels");
  }
  const auto set = pipeline::cluster_anchors(videos, ac, o.levels);
  const std::string text = anchors::anchors_to_json(set);
  if (!o.out.empty()) io::write_text_file(o.out, text + "\n");
  std::cout << text << std::endl;
  return 0;
}

int cmd_train(const Options& o) {
  auto cfg = load_config(o.config);
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.threads) cfg.train.threads = o.threads;
  if (o.seed) cfg.train.seed = cfg.model.seed = *o.seed;
  cfg.validate();
  const fs::path data = o.data.empty() ? fs::path(cfg.paths.data_dir) : fs::path(o.data);
  const fs::path run = o.out.empty() ? fs::path(cfg.paths.run_dir) : fs::path(o.out);
  log("training from " + data.string() + " into " + run.string());
  const auto art = pipeline::train_from_disk(cfg, data, run);
  const auto& last = art.epochs.back();
  summary({{"command", "train"},
           {"epochs", art.epochs.size()},
           {"initial_loss", art.epochs.front().loss.total},
           {"final_loss", last.loss.total},
           {"checkpoint", art.checkpoint.string()},
           {"pem_checkpoint", art.pem_checkpoint.string()},
           {"log", art.log.string()}});
  return 0;
}

int cmd_infer(const Options& o) {
  if (o.checkpoint.empty() || o.features.empty()) {
    throw ConfigError("infer needs --checkpoint and --features");
  }
  const fs::path out = o.out.empty() ? fs::path("infer") : fs::path(o.out);
  const auto model = model::load_model(o.checkpoint);
  const auto features = pipeline::read_features(o.features);
  log("inferring " + std::to_string(features.size()) + " videos");
  const auto res = pipeline::infer(model, features);
  pipeline::echo_config({{"checkpoint", o.checkpoint},
                         {"features", o.features},
                         {"model", model::to_json(model.config)}},
                        out);
  io::write_proposals(out / "proposals_raw.json", res.proposals);
  io::write_actionness(out / "actionness.json", res.actionness);
  summary({{"command", "infer"},
           {"videos", features.size()},
           {"dropped", res.dropped},
           {"proposals", (out / "proposals_raw.json").string()},
           {"actionness", (out / "actionness.json").string()}});
  return 0;
}

int cmd_postprocess(const Options& o) {
  auto cfg = load_config(o.config);
  if (o.proposals.empty()) throw ConfigError("postprocess needs --proposals");
  if (o.nms_sigma) cfg.nms.sigma = *o.nms_sigma;
  cfg.nms.validate();
  bool use_pem = cfg.postprocess.pem && !o.no_pem;
  bool use_tag = (cfg.postprocess.tag || o.tag) && !o.no_tag;
  if (use_pem && o.pem.empty() && o.oracle_gt.empty()) {
    log("no --pem checkpoint given; skipping re-ranking");
    use_pem = false;
  }
  const auto raw = io::read_proposals(o.proposals);
  io::ActionnessMap act;
  if (!o.actionness.empty()) {
    act = io::read_actionness(o.actionness);
  } else if (use_tag || (use_pem && o.oracle_gt.empty())) {
    throw ConfigError("--actionness is required for PEM and TAG");
  }
  std::optional<post::PemModel> pem;
  io::AnnotationMap oracle;
  pipeline::PostprocessOptions opt;
  opt.nms = cfg.nms;
  if (use_tag) opt.tag = cfg.tag;
  if (use_pem) {
    if (!o.oracle_gt.empty()) {
      pem = post::PemModel::oracle(cfg.pem);
      oracle = io::load_annotations(o.oracle_gt).videos;
      opt.oracle_gts = &oracle;
    } else {
      pem = post::PemModel::load(o.pem);
    }
    opt.pem = &*pem;
  }
  pipeline::PostprocessReport report;
  const auto result = pipeline::postprocess(raw, act, opt, &report);
  for (const auto& v : report.missing_actionness) log("no actionness for " + v + "; not re-ranked");
  const fs::path out = o.out.empty() ? fs::path("proposals.json") : fs::path(o.out);
  if (out.has_parent_path()) {
    json echo = pipeline::to_json(cfg);
    echo["postprocess"] = {{"pem", use_pem}, {"tag", use_tag}};
    pipeline::echo_config(echo, out.parent_path());
  }
  io::write_proposals(out, result);
  summary({{"command", "postprocess"},
           {"videos", result.size()},
           {"pem", use_pem},
           {"tag", use_tag},
           {"missing_actionness", report.missing_actionness.size()},
           {"out", out.string()}});
  return 0;
}

int cmd_ensemble(const Options& o) {
  auto cfg = load_config(o.config);
  if (o.nms_sigma) cfg.nms.sigma = *o.nms_sigma;
  if (o.inputs.size() < 2) throw ConfigError("ensemble needs at least two proposal files");
  std::vector<io::ProposalMap> sources;
  for (const auto& f : o.inputs) sources.push_back(io::read_proposals(f));
  post::FuseReport report;
  const auto fused = post::ensemble_fuse(sources, cfg.nms, &report);
  if (report.single_source_videos) {
    log(std::to_string(report.single_source_videos) + " videos present in one source only");
  }
  const fs::path out = o.out.empty() ? fs::path("ensemble.json") : fs::path(o.out);
  if (out.has_parent_path()) {
    pipeline::echo_config({{"inputs", o.inputs}, {"nms", post::to_json(cfg.nms)}},
                          out.parent_path());
  }
  io::write_proposals(out, fused);
  summary({{"command", "ensemble"},
           {"sources", sources.size()},
           {"videos", fused.size()},
           {"single_source_videos", report.single_source_videos},
           {"out", out.string()}});
  return 0;
}

int cmd_eval(const Options& o) {
  auto cfg = load_config(o.config);
  if (o.gt.empty() || o.proposals.empty()) throw ConfigError("eval needs --gt and --proposals");
  const auto ann = io::load_annotations(o.gt).videos;
  const auto gts = eval::ground_truth_from(ann, subset_arg(o.subset));
  const auto props = io::read_proposals(o.proposals);
  auto report = eval::evaluate(props, gts, cfg.eval);
  report.config["gt"] = o.gt;
  report.config["proposals"] = o.proposals;
  report.config["subset"] = o.subset.empty() ? "all" : o.subset;
  const fs::path out = o.out.empty() ? fs::path("eval") : fs::path(o.out);
  eval::emit_report(report, out);
  summary({{"command", "eval"},
           {"AR@1", report.ar1},
           {"AR@5", report.ar5},
           {"AR@10", report.ar10},
           {"AR@100", report.ar100},
           {"AUC", report.auc},
           {"out", out.string()}});
  return 0;
}

int exit_code_for(ErrorKind k) {
  return k == ErrorKind::kConfig ? kUsageExit : kRuntimeExit;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RapNet temporal action proposal pipeline", "rapnet"};
  app.set_version_flag("--version", std::string("rapnet ") + RAPNET_VERSION);
  app.require_subcommand(1);
  Options o;
  app.add_option("--threads", o.threads, "Worker threads (1 = serial)")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--config", o.config, "Pipeline config JSON");
  gen->add_option("--out", o.out, "Output data directory");
  gen->add_option("--num-videos", o.num_videos);
  gen->add_option("--seed", o.seed);
  gen->add_option("--noise", o.noise, "Feature noise sigma");

  auto* clu = app.add_subcommand("cluster-anchors", "K-means anchor widths");
  clu->add_option("--config", o.config);
  clu->add_option("--k", o.k)->check(CLI::PositiveNumber);
  clu->add_option("--levels", o.levels)->check(CLI::PositiveNumber);
  clu->add_option("--annotations", o.annotations);
  clu->add_option("--seed", o.seed);
  clu->add_option("--out", o.out, "Also write the anchors JSON here");

  auto* tr = app.add_subcommand("train", "Train the proposal network and PEM");
  tr->add_option("--config", o.config);
  tr->add_option("--data", o.data, "Data directory");
  tr->add_option("--out", o.out, "Run directory");
  tr->add_option("--epochs", o.epochs);
  tr->add_option("--seed", o.seed);
  tr->add_option("--threads", o.threads)->check(CLI::PositiveNumber);

  auto* inf = app.add_subcommand("infer", "Raw proposals and actionness");
  inf->add_option("--checkpoint", o.checkpoint)->required();
  inf->add_option("--features", o.features, "Feature file or directory")->required();
  inf->add_option("--out", o.out, "Output directory");

  auto* pp = app.add_subcommand("postprocess", "PEM, soft-NMS and TAG");
  pp->add_option("--config", o.config);
  pp->add_option("--proposals", o.proposals)->required();
  pp->add_option("--actionness", o.actionness);
  pp->add_option("--pem", o.pem, "PEM checkpoint");
  pp->add_flag("--no-pem", o.no_pem);
  pp->add_option("--oracle-gt", o.oracle_gt, "Score with true IoU against these annotations");
  pp->add_flag("--tag", o.tag);
  pp->add_flag("--no-tag", o.no_tag);
  pp->add_option("--nms-sigma", o.nms_sigma);
  pp->add_option("--out", o.out, "Output proposals file");

  auto* ens = app.add_subcommand("ensemble", "Fuse proposal files");
  ens->add_option("--config", o.config);
  ens->add_option("inputs", o.inputs, "Proposal files")->required();
  ens->add_option("--nms-sigma", o.nms_sigma);
  ens->add_option("--out", o.out, "Output proposals file");

  auto* ev = app.add_subcommand("eval", "AR@AN and AUC");
  ev->add_option("--config", o.config);
  ev->add_option("--gt", o.gt)->required();
  ev->add_option("--proposals", o.proposals)->required();
  ev->add_option("--subset", o.subset, "training, validation, testing or all");
  ev->add_option("--out", o.out, "Report directory");

  if (argc < 2) {
    std::cerr << app.help();
    return kUsageExit;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageExit;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*clu) return cmd_cluster_anchors(o);
    if (*tr) return cmd_train(o);
    if (*inf) return cmd_infer(o);
    if (*pp) return cmd_postprocess(o);
    if (*ens) return cmd_ensemble(o);
    if (*ev) return cmd_eval(o);
  } catch (const rapnet::Error& e) {
    log(std::string("error: ") + e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return kRuntimeExit;
  }
  return kUsageExit;
}
