#include "rapnet/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

#include "rapnet/error.hpp"

namespace rapnet::io {

using nlohmann::json;

std::string subset_name(Subset s) {
  switch (s) {
    case Subset::kTraining: return "training";
    case Subset::kValidation: return "validation";
    case Subset::kTesting: return "testing";
  }
  return "training";
}

Subset parse_subset(const std::string& name) {
  if (name == "training") return Subset::kTraining;
  if (name == "validation") return Subset::kValidation;
  if (name == "testing") return Subset::kTesting;
  throw IngestError("unknown subset '" + name + "'");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Annotations

AnnotationIngest parse_annotations(const std::string& json_text,
                                   const std::string& source) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw IngestError(source + ": malformed JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("database") || !doc["database"].is_object()) {
    throw IngestError(source + ": missing object key 'database'");
  }
  AnnotationIngest result;
  for (const auto& [vid, entry] : doc["database"].items()) {
    const std::string where = source + ": database." + vid;
    if (!entry.is_object()) throw IngestError(where + ": entry is not an object");
    if (!entry.contains("duration") || !entry["duration"].is_number()) {
      throw IngestError(where + ".duration: missing or not a number");
    }
    VideoAnnotation va;
    va.video_id = vid;
    va.duration_seconds = entry["duration"].get<double>();
    if (!(va.duration_seconds > 0.0)) {
      throw IngestError(where + ".duration: must be positive, got " +
                        std::to_string(va.duration_seconds));
    }
    if (entry.contains("subset")) {
      if (!entry["subset"].is_string()) throw IngestError(where + ".subset: not a string");
      try {
        va.subset = parse_subset(entry["subset"].get<std::string>());
      } catch (const IngestError& e) {
        throw IngestError(where + ".subset: " + e.what());
      }
    }
    if (entry.contains("annotations")) {
      const auto& anns = entry["annotations"];
      if (!anns.is_array()) throw IngestError(where + ".annotations: not an array");
      for (std::size_t i = 0; i < anns.size(); ++i) {
        const std::string akey = where + ".annotations[" + std::to_string(i) + "]";
        const auto& a = anns[i];
        if (!a.is_object() || !a.contains("segment") || !a["segment"].is_array() ||
            a["segment"].size() != 2 || !a["segment"][0].is_number() ||
            !a["segment"][1].is_number()) {
          throw IngestError(akey + ".segment: expected [start, end] in seconds");
        }
        double s = a["segment"][0].get<double>();
        double e = a["segment"][1].get<double>();
        bool clamped = false;
        if (s < 0.0) { s = 0.0; clamped = true; }
        if (e > va.duration_seconds) { e = va.duration_seconds; clamped = true; }
        if (s > va.duration_seconds) { s = va.duration_seconds; clamped = true; }
        if (e < 0.0) { e = 0.0; clamped = true; }
        if (clamped) ++result.clamped_segments;
        TemporalSegment seg{s / va.duration_seconds, e / va.duration_seconds};
        if (!seg.valid()) {
          throw IngestError(akey + ".segment: empty interval after clamping");
        }
        va.segments.push_back(seg);
        va.labels.push_back(a.contains("label") && a["label"].is_string()
                                ? a["label"].get<std::string>()
                                : std::string());
      }
    }
    result.videos.emplace(vid, std::move(va));
  }
  return result;
}

AnnotationIngest load_annotations(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IngestError(path.string() + ": file does not exist");
  }
  return parse_annotations(read_text_file(path), path.string());
}

void write_annotations(const std::filesystem::path& path, const AnnotationMap& videos) {
  json db = json::object();
  for (const auto& [vid, va] : videos) {
    json anns = json::array();
    for (std::size_t i = 0; i < va.segments.size(); ++i) {
      anns.push_back({{"segment",
                       {va.segments[i].start * va.duration_seconds,
                        va.segments[i].end * va.duration_seconds}},
                      {"label", i < va.labels.size() ? va.labels[i] : "action"}});
    }
    db[vid] = {{"duration", va.duration_seconds},
               {"subset", subset_name(va.subset)},
               {"annotations", anns}};
  }
  write_text_file(path, json{{"database", db}}.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Features

FeatureMap rescale_features(const FeatureMap& f, std::size_t target_T) {
  if (target_T < 1) throw ContractError("rescale_features: target length must be >= 1");
  const std::size_t src_T = f.length();
  const std::size_t d = f.dim();
  if (src_T == target_T) return f;
  nn::Tensor out({target_T, d});
  for (std::size_t j = 0; j < target_T; ++j) {
    double pos = target_T == 1
                     ? 0.5 * static_cast<double>(src_T - 1)
                     : static_cast<double>(j * (src_T - 1)) /
                           static_cast<double>(target_T - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, src_T - 1);
    const double frac = pos - static_cast<double>(lo);
    for (std::size_t c = 0; c < d; ++c) {
      const double a = f.values.at(lo, c);
      out.at(j, c) = frac == 0.0 ? a : a + frac * (f.values.at(hi, c) - a);
    }
  }
  // Exact on constant columns: a + frac * 0 == a.
  return FeatureMap{f.video_id, std::move(out)};
}

namespace {

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(bytes[offset + static_cast<std::size_t>(i)]) << (8 * i);
  }
  return v;
}

constexpr std::size_t kFeatureHeaderBytes = 16;

}  // namespace

std::vector<std::uint8_t> encode_feature_map(const FeatureMap& f) {
  std::vector<std::uint8_t> buf;
  buf.reserve(kFeatureHeaderBytes + 4 * f.values.size());
  for (char c : std::string("RAPF")) buf.push_back(static_cast<std::uint8_t>(c));
  put_u32(buf, kFeatureFileVersion);
  put_u32(buf, static_cast<std::uint32_t>(f.length()));
  put_u32(buf, static_cast<std::uint32_t>(f.dim()));
  for (double v : f.values.data()) {
    put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return buf;
}

FeatureMap decode_feature_map(std::span<const std::uint8_t> bytes, std::string video_id) {
  if (bytes.size() < kFeatureHeaderBytes) {
    throw FormatError("feature file truncated in header", bytes.size());
  }
  if (std::memcmp(bytes.data(), "RAPF", 4) != 0) {
    throw FormatError("bad magic, expected RAPF", 0);
  }
  const auto version = get_u32(bytes, 4);
  if (version != kFeatureFileVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(version), 4);
  }
  const std::size_t t = get_u32(bytes, 8);
  const std::size_t d = get_u32(bytes, 12);
  if (t == 0 || d == 0) throw FormatError("zero extent in feature header", 8);
  const std::size_t expected = kFeatureHeaderBytes + 4 * t * d;
  if (bytes.size() < expected) {
    throw FormatError("feature payload truncated: expected " + std::to_string(expected) +
                          " bytes",
                      bytes.size());
  }
  if (bytes.size() > expected) {
    throw FormatError("trailing bytes after feature payload", expected);
  }
  nn::Tensor values({t, d});
  for (std::size_t i = 0; i < t * d; ++i) {
    values[i] = static_cast<double>(
        std::bit_cast<float>(get_u32(bytes, kFeatureHeaderBytes + 4 * i)));
  }
  return FeatureMap{std::move(video_id), std::move(values)};
}

void write_feature_file(const std::filesystem::path& path, const FeatureMap& f) {
  const auto bytes = encode_feature_map(f);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

FeatureMap read_feature_file(const std::filesystem::path& path) {
  const std::string raw = read_text_file(path);
  std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(raw.data()),
                                      raw.size());
  try {
    return decode_feature_map(bytes, path.stem().string());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SyntheticSpec::validate() const {
  if (num_videos < 1) throw ConfigError("synthetic.num_videos must be >= 1");
  if (feature_dim < 4) throw ConfigError("synthetic.feature_dim must be >= 4");
  if (temporal_length < 8) throw ConfigError("synthetic.temporal_length must be >= 8");
  if (!(mean_instances_per_video > 0.0)) {
    throw ConfigError("synthetic.mean_instances_per_video must be positive");
  }
  const auto [lo, hi] = duration_range;
  if (!(lo > 0.0 && lo < hi && hi <= 1.0)) {
    throw ConfigError("synthetic.duration_range must satisfy 0 < low < high <= 1");
  }
  if (!(actionness_noise_sigma >= 0.0)) {
    throw ConfigError("synthetic.actionness_noise_sigma must be nonnegative");
  }
  if (!(validation_fraction >= 0.0 && validation_fraction <= 1.0)) {
    throw ConfigError("synthetic.validation_fraction must lie in [0, 1]");
  }
}

int clip_instance_count(long long poisson_draw) noexcept {
  return static_cast<int>(std::clamp(poisson_draw, 1LL, 4LL));
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mass of the unit-area triangle of half-width h centered at 0 on (-inf, x].
double triangle_cdf(double x, double h) {
  if (x <= -h) return 0.0;
  if (x >= h) return 1.0;
  if (x <= 0.0) {
    const double u = (x + h) / h;
    return 0.5 * u * u;
  }
  const double u = (h - x) / h;
  return 1.0 - 0.5 * u * u;
}

}  // namespace

std::vector<double> oracle_actionness(std::span<const TemporalSegment> segments,
                                      std::size_t T) {
  std::vector<double> curve(T, 0.0);
  const double h = 0.5 / static_cast<double>(T);
  for (std::size_t i = 0; i < T; ++i) {
    const double c = (static_cast<double>(i) + 0.5) / static_cast<double>(T);
    double v = 0.0;
    for (const auto& s : segments) {
      v += triangle_cdf(s.end - c, h) - triangle_cdf(s.start - c, h);
    }
    curve[i] = std::clamp(v, 0.0, 1.0);
  }
  return curve;
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t T = spec.temporal_length;
  const std::size_t D = spec.feature_dim;
  const std::size_t inside_dims = std::max<std::size_t>(1, D / 4);
  const std::size_t boundary_dims = std::max<std::size_t>(1, D / 8);
  const auto n_val = static_cast<std::size_t>(
      std::llround(spec.validation_fraction * static_cast<double>(spec.num_videos)));
  const std::size_t n_train = spec.num_videos - std::min(n_val, spec.num_videos);
  const auto min_w = std::max<long long>(
      1, std::llround(spec.duration_range.first * static_cast<double>(T)));
  const auto max_w = std::max<long long>(
      min_w, std::llround(spec.duration_range.second * static_cast<double>(T)));

  SyntheticCorpus corpus;
  for (std::size_t v = 0; v < spec.num_videos; ++v) {
    std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(v)));
    char id[32];
    std::snprintf(id, sizeof id, "v_%06zu", v);

    std::poisson_distribution<long long> count_dist(spec.mean_instances_per_video);
    const int count = clip_instance_count(count_dist(rng));
    std::uniform_real_distribution<double> width_dist(spec.duration_range.first,
                                                      spec.duration_range.second);
    std::vector<long long> widths;
    for (int i = 0; i < count; ++i) {
      const auto w = std::llround(width_dist(rng) * static_cast<double>(T));
      widths.push_back(std::clamp<long long>(w, min_w, max_w));
    }

    // Snippet intervals [a, b), at least one snippet away from both ends and
    // from each other.
    std::vector<std::pair<long long, long long>> placed;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      placed.clear();
      ok = true;
      for (long long w : widths) {
        const long long hi = static_cast<long long>(T) - 1 - w;
        if (hi < 1) { ok = false; break; }
        std::uniform_int_distribution<long long> start_dist(1, hi);
        bool put = false;
        for (int tries = 0; tries < 32 && !put; ++tries) {
          const long long a = start_dist(rng);
          const long long b = a + w;
          bool clash = false;
          for (const auto& [pa, pb] : placed) {
            if (a < pb + 1 && pa < b + 1) { clash = true; break; }
          }
          if (!clash) {
            placed.emplace_back(a, b);
            put = true;
          }
        }
        if (!put) { ok = false; break; }
      }
    }
    if (!ok) {
      throw GenerationError("cannot place " + std::to_string(count) +
                            " non-overlapping instances in video index " +
                            std::to_string(v) + " after 100 attempts");
    }
    std::sort(placed.begin(), placed.end());

    VideoAnnotation va;
    va.video_id = id;
    va.subset = v < n_train ? Subset::kTraining : Subset::kValidation;
    va.duration_seconds = std::uniform_real_distribution<double>(30.0, 240.0)(rng);
    for (const auto& [a, b] : placed) {
      va.segments.push_back({static_cast<double>(a) / static_cast<double>(T),
                             static_cast<double>(b) / static_cast<double>(T)});
      va.labels.emplace_back("action");
    }

    auto act = oracle_actionness(va.segments, T);
    nn::Tensor values({T, D}, 0.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double c = static_cast<double>(t) + 0.5;
      double start_bump = 0.0;
      double end_bump = 0.0;
      for (const auto& [a, b] : placed) {
        const double ds = c - static_cast<double>(a);
        const double de = c - static_cast<double>(b);
        start_bump = std::max(start_bump, std::exp(-0.5 * ds * ds));
        end_bump = std::max(end_bump, std::exp(-0.5 * de * de));
      }
      for (std::size_t k = 0; k < D; ++k) {
        double x = 0.0;
        if (k < inside_dims) {
          x = 2.0 * act[t] - 1.0;
        } else if (k < inside_dims + boundary_dims) {
          x = start_bump;
        } else if (k < inside_dims + 2 * boundary_dims) {
          x = end_bump;
        }
        if (spec.actionness_noise_sigma > 0.0) {
          x += spec.actionness_noise_sigma * noise(rng);
        }
        values.at(t, k) = static_cast<double>(static_cast<float>(x));
      }
    }
    corpus.actionness.emplace(va.video_id, std::move(act));
    corpus.features.push_back(FeatureMap{va.video_id, std::move(values)});
    corpus.annotations.emplace(va.video_id, std::move(va));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Proposals

void ProposalRecord::set_stage(Stage stage, double value) {
  switch (stage) {
    case Stage::kRawConf: stage_scores.raw_conf = value; break;
    case Stage::kPem: stage_scores.pem = value; break;
    case Stage::kPostNms: stage_scores.post_nms = value; break;
  }
  if (stage_scores.post_nms) {
    score = *stage_scores.post_nms;
  } else if (stage_scores.pem) {
    score = *stage_scores.pem;
  } else if (stage_scores.raw_conf) {
    score = *stage_scores.raw_conf;
  }
}

bool proposal_rank_less(const ProposalRecord& a, const ProposalRecord& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.segment.start != b.segment.start) return a.segment.start < b.segment.start;
  return a.segment.end < b.segment.end;
}

void sort_by_rank(std::vector<ProposalRecord>& records) {
  std::stable_sort(records.begin(), records.end(), proposal_rank_less);
}

namespace {

double quantize6(double x) { return std::round(x * 1e6) / 1e6; }

}  // namespace

std::string proposals_to_json(const ProposalMap& proposals) {
  json results = json::object();
  for (const auto& [vid, recs] : proposals) {
    std::vector<ProposalRecord> sorted = recs;
    for (auto& r : sorted) {
      r.segment = {quantize6(r.segment.start), quantize6(r.segment.end)};
      r.score = quantize6(r.score);
    }
    sort_by_rank(sorted);
    json arr = json::array();
    for (const auto& r : sorted) {
      arr.push_back({{"segment", {r.segment.start, r.segment.end}}, {"score", r.score}});
    }
    results[vid] = std::move(arr);
  }
  return json{{"version", "1.0"}, {"results", results}}.dump() + "\n";
}

ProposalMap proposals_from_json(const std::string& json_text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw IngestError(source + ": malformed JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("results") || !doc["results"].is_object()) {
    throw IngestError(source + ": missing object key 'results'");
  }
  ProposalMap out;
  for (const auto& [vid, arr] : doc["results"].items()) {
    const std::string where = source + ": results." + vid;
    if (!arr.is_array()) throw IngestError(where + ": not an array");
    auto& recs = out[vid];
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto& e = arr[i];
      const std::string key = where + "[" + std::to_string(i) + "]";
      if (!e.is_object() || !e.contains("segment") || !e["segment"].is_array() ||
          e["segment"].size() != 2 || !e.contains("score") || !e["score"].is_number()) {
        throw IngestError(key + ": expected {\"segment\": [s, e], \"score\": p}");
      }
      ProposalRecord r;
      r.video_id = vid;
      r.segment = {e["segment"][0].get<double>(), e["segment"][1].get<double>()};
      r.score = e["score"].get<double>();
      r.stage_scores.raw_conf = r.score;
      recs.push_back(std::move(r));
    }
  }
  return out;
}

void write_proposals(const std::filesystem::path& path, const ProposalMap& proposals) {
  write_text_file(path, proposals_to_json(proposals));
}

ProposalMap read_proposals(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IngestError(path.string() + ": file does not exist");
  }
  return proposals_from_json(read_text_file(path), path.string());
}

void write_actionness(const std::filesystem::path& path, const ActionnessMap& curves) {
  json doc = json::object();
  for (const auto& [vid, c] : curves) doc[vid] = c;
  write_text_file(path, doc.dump() + "\n");
}

ActionnessMap read_actionness(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IngestError(path.string() + ": file does not exist");
  }
  json doc;
  try {
    doc = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw IngestError(path.string() + ": malformed JSON: " + e.what());
  }
  ActionnessMap out;
  for (const auto& [vid, arr] : doc.items()) {
    if (!arr.is_array()) throw IngestError(path.string() + ": " + vid + " is not an array");
    out[vid] = arr.get<std::vector<double>>();
  }
  return out;
}

}  // namespace rapnet::io
