#include "readpvla/task_synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "readpvla/errors.hpp"
#include "readpvla/rng.hpp"

namespace readpvla {

namespace fs = std::filesystem;
using nlohmann::json;

void DatasetSpec::validate() const {
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw ConfigError("dataset: split sizes must be positive");
  }
  if (min_frames == 0 || min_frames > max_frames || min_tokens == 0 ||
      min_tokens > max_tokens) {
    throw ConfigError("dataset: invalid frame/token ranges");
  }
  if (concept_dim == 0 || video_width == 0 || lang_width == 0) {
    throw ConfigError("dataset: widths must be positive");
  }
  if (noise_sigma < 0.0) throw ConfigError("dataset: noise_sigma must be >= 0");
  if (min_span == 0 || min_span > max_span) {
    throw ConfigError("dataset: invalid span range");
  }
  if (min_span >= min_frames) {
    throw ConfigError("dataset: span of " + std::to_string(min_span) +
                      " frames cannot leave a negative frame in " +
                      std::to_string(min_frames) + "-frame videos");
  }
}

namespace {

// concept -> feature renders; the language render shares most of its
// direction with the video render so matched pairs stay geometrically close.
struct Renders {
  std::vector<double> video;  // concept_dim x video_width
  std::vector<double> lang;   // concept_dim x lang_width
};

Renders make_renders(const DatasetSpec& spec, Rng& rng) {
  Renders r;
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.concept_dim));
  r.video.resize(spec.concept_dim * spec.video_width);
  for (double& v : r.video) v = rng.normal(0.0, scale);
  r.lang.resize(spec.concept_dim * spec.lang_width);
  if (spec.video_width == spec.lang_width) {
    const double blend = 0.35;
    const double keep = std::sqrt(1.0 - blend * blend);
    for (std::size_t i = 0; i < r.lang.size(); ++i)
      r.lang[i] = keep * r.video[i] + blend * rng.normal(0.0, scale);
  } else {
    for (double& v : r.lang) v = rng.normal(0.0, scale);
  }
  return r;
}

std::vector<double> render(const std::vector<double>& projection,
                           const std::vector<double>& concept_vec,
                           std::size_t width, double sigma, Rng& rng) {
  std::vector<double> out(width, 0.0);
  const std::size_t cd = concept_vec.size();
  for (std::size_t c = 0; c < cd; ++c) {
    const double cv = concept_vec[c];
    if (cv == 0.0) continue;
    const double* row = &projection[c * width];
    for (std::size_t j = 0; j < width; ++j) out[j] += cv * row[j];
  }
  for (double& v : out) v += sigma * rng.normal();
  return out;
}

std::vector<double> draw_concept(std::size_t dim, Rng& rng) {
  std::vector<double> c(dim);
  for (double& v : c) v = rng.normal();
  return c;
}

GroundingSample draw_sample(const DatasetSpec& spec, const Renders& renders,
                            Rng& rng) {
  const std::size_t n_v = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(spec.min_frames),
                  static_cast<std::int64_t>(spec.max_frames)));
  const std::size_t n_l = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(spec.min_tokens),
                  static_cast<std::int64_t>(spec.max_tokens)));
  const std::size_t span_cap = std::min(spec.max_span, n_v - 1);
  if (spec.min_span > span_cap) {
    throw ConfigError("dataset: span cannot fit in a " + std::to_string(n_v) +
                      "-frame video");
  }
  const std::size_t span_len = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(spec.min_span),
                  static_cast<std::int64_t>(span_cap)));
  const std::size_t span_start =
      static_cast<std::size_t>(rng.integer(n_v - span_len + 1));

  const std::vector<double> concept_vec = draw_concept(spec.concept_dim, rng);

  GroundingSample sample;
  std::vector<double> video(n_v * spec.video_width);
  sample.labels.assign(n_v, 0.0);
  for (std::size_t i = 0; i < n_v; ++i) {
    const bool in_span = i >= span_start && i < span_start + span_len;
    sample.labels[i] = in_span ? 1.0 : 0.0;
    const std::vector<double> source =
        in_span ? concept_vec : draw_concept(spec.concept_dim, rng);
    const std::vector<double> row = render(renders.video, source,
                                           spec.video_width, spec.noise_sigma, rng);
    std::copy(row.begin(), row.end(), video.begin() + i * spec.video_width);
  }
  sample.video_feats =
      Tensor::from_data({n_v, spec.video_width}, std::move(video));

  // Query tokens carry the concept; the rest are distractors.
  const std::size_t n_query = std::max<std::size_t>(1, (2 * n_l + 2) / 5);
  std::vector<std::size_t> order(n_l);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<char> is_query(n_l, 0);
  for (std::size_t q = 0; q < n_query; ++q) is_query[order[q]] = 1;

  std::vector<double> lang(n_l * spec.lang_width);
  for (std::size_t j = 0; j < n_l; ++j) {
    const std::vector<double> source =
        is_query[j] ? concept_vec : draw_concept(spec.concept_dim, rng);
    const std::vector<double> row =
        render(renders.lang, source, spec.lang_width, spec.noise_sigma, rng);
    std::copy(row.begin(), row.end(), lang.begin() + j * spec.lang_width);
  }
  sample.lang_feats = Tensor::from_data({n_l, spec.lang_width}, std::move(lang));
  return sample;
}

}  // namespace

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Renders renders = make_renders(spec, rng);
  Dataset data;
  data.spec = spec;
  auto fill = [&](std::vector<GroundingSample>& split, std::size_t n) {
    split.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      split.push_back(draw_sample(spec, renders, rng));
  };
  fill(data.train, spec.n_train);
  fill(data.val, spec.n_val);
  fill(data.test, spec.n_test);
  return data;
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<double>& labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) +
                         " scores vs " + std::to_string(labels.size()) +
                         " labels");
  }
  std::size_t n_pos = 0;
  for (double l : labels) {
    if (l != 0.0 && l != 1.0) {
      throw DataError("average_precision: labels must be 0 or 1");
    }
    if (l == 1.0) ++n_pos;
  }
  if (n_pos == 0) {
    throw DataError("average_precision: no positive labels, metric undefined");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return scores[x] > scores[y];
  });
  double hits = 0.0, acc = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1.0) {
      hits += 1.0;
      acc += hits / static_cast<double>(rank + 1);
    }
  }
  return acc / static_cast<double>(n_pos);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void write_f32_blob(const fs::path& path, const std::vector<const Tensor*>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const Tensor* t : tensors) {
    for (double v : t->data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const unsigned char bytes[4] = {
          static_cast<unsigned char>(bits & 0xff),
          static_cast<unsigned char>((bits >> 8) & 0xff),
          static_cast<unsigned char>((bits >> 16) & 0xff),
          static_cast<unsigned char>((bits >> 24) & 0xff)};
      out.write(reinterpret_cast<const char*>(bytes), 4);
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<double> read_f32_blob(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> raw(count * 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw IoError("truncated blob " + path.string());
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                               (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

json spec_to_json(const DatasetSpec& s) {
  return json{{"seed", s.seed},
              {"n_train", s.n_train},
              {"n_val", s.n_val},
              {"n_test", s.n_test},
              {"min_frames", s.min_frames},
              {"max_frames", s.max_frames},
              {"min_tokens", s.min_tokens},
              {"max_tokens", s.max_tokens},
              {"concept_dim", s.concept_dim},
              {"video_width", s.video_width},
              {"lang_width", s.lang_width},
              {"noise_sigma", s.noise_sigma},
              {"min_span", s.min_span},
              {"max_span", s.max_span}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.n_train = j.at("n_train").get<std::size_t>();
  s.n_val = j.at("n_val").get<std::size_t>();
  s.n_test = j.at("n_test").get<std::size_t>();
  s.min_frames = j.at("min_frames").get<std::size_t>();
  s.max_frames = j.at("max_frames").get<std::size_t>();
  s.min_tokens = j.at("min_tokens").get<std::size_t>();
  s.max_tokens = j.at("max_tokens").get<std::size_t>();
  s.concept_dim = j.at("concept_dim").get<std::size_t>();
  s.video_width = j.at("video_width").get<std::size_t>();
  s.lang_width = j.at("lang_width").get<std::size_t>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.min_span = j.at("min_span").get<std::size_t>();
  s.max_span = j.at("max_span").get<std::size_t>();
  return s;
}

const char* kSplitNames[] = {"train", "val", "test"};

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

  json header;
  header["format"] = "readpvla-dataset-v1";
  header["spec"] = spec_to_json(dataset.spec);
  const std::vector<GroundingSample>* splits[] = {&dataset.train, &dataset.val,
                                                  &dataset.test};
  for (int s = 0; s < 3; ++s) {
    json shapes = json::array();
    std::vector<const Tensor*> videos, langs;
    std::vector<unsigned char> labels;
    for (const GroundingSample& sample : *splits[s]) {
      shapes.push_back({{"frames", sample.frames()}, {"tokens", sample.tokens()}});
      videos.push_back(&sample.video_feats);
      langs.push_back(&sample.lang_feats);
      for (double l : sample.labels)
        labels.push_back(static_cast<unsigned char>(l != 0.0 ? 1 : 0));
    }
    header["splits"][kSplitNames[s]] = shapes;
    const fs::path base = fs::path(dir) / kSplitNames[s];
    write_f32_blob(base.string() + ".video.f32", videos);
    write_f32_blob(base.string() + ".lang.f32", langs);
    std::ofstream lab(base.string() + ".labels.u8", std::ios::binary);
    if (!lab) throw IoError("cannot open " + base.string() + ".labels.u8");
    lab.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
  }
  std::ofstream out(fs::path(dir) / "header.json");
  if (!out) throw IoError("cannot write header.json under " + dir);
  out << header.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "header.json");
  if (!in) throw IoError("cannot open " + dir + "/header.json");
  json header;
  try {
    in >> header;
  } catch (const json::exception& e) {
    throw IoError("malformed header.json under " + dir + ": " + e.what());
  }
  if (header.value("format", "") != "readpvla-dataset-v1") {
    throw CompatibilityError("unrecognized dataset format in " + dir);
  }
  Dataset data;
  data.spec = spec_from_json(header.at("spec"));

  std::vector<GroundingSample>* splits[] = {&data.train, &data.val, &data.test};
  for (int s = 0; s < 3; ++s) {
    const json& shapes = header.at("splits").at(kSplitNames[s]);
    const fs::path base = fs::path(dir) / kSplitNames[s];
    std::size_t video_total = 0, lang_total = 0, label_total = 0;
    for (const json& sh : shapes) {
      video_total += sh.at("frames").get<std::size_t>() * data.spec.video_width;
      lang_total += sh.at("tokens").get<std::size_t>() * data.spec.lang_width;
      label_total += sh.at("frames").get<std::size_t>();
    }
    const std::vector<double> videos =
        read_f32_blob(base.string() + ".video.f32", video_total);
    const std::vector<double> langs =
        read_f32_blob(base.string() + ".lang.f32", lang_total);
    std::ifstream lab(base.string() + ".labels.u8", std::ios::binary);
    if (!lab) throw IoError("cannot open " + base.string() + ".labels.u8");
    std::vector<unsigned char> labels(label_total);
    lab.read(reinterpret_cast<char*>(labels.data()),
             static_cast<std::streamsize>(labels.size()));
    if (lab.gcount() != static_cast<std::streamsize>(labels.size())) {
      throw IoError("truncated labels in " + base.string() + ".labels.u8");
    }
    std::size_t voff = 0, loff = 0, yoff = 0;
    for (const json& sh : shapes) {
      const std::size_t nf = sh.at("frames").get<std::size_t>();
      const std::size_t nt = sh.at("tokens").get<std::size_t>();
      GroundingSample sample;
      sample.video_feats = Tensor::from_data(
          {nf, data.spec.video_width},
          std::vector<double>(videos.begin() + voff,
                              videos.begin() + voff + nf * data.spec.video_width));
      sample.lang_feats = Tensor::from_data(
          {nt, data.spec.lang_width},
          std::vector<double>(langs.begin() + loff,
                              langs.begin() + loff + nt * data.spec.lang_width));
      sample.labels.resize(nf);
      for (std::size_t i = 0; i < nf; ++i)
        sample.labels[i] = labels[yoff + i] ? 1.0 : 0.0;
      voff += nf * data.spec.video_width;
      loff += nt * data.spec.lang_width;
      yoff += nf;
      splits[s]->push_back(std::move(sample));
    }
  }
  return data;
}

}  // namespace readpvla
