#include "readpvla/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "readpvla/errors.hpp"

namespace readpvla {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "readpvla-checkpoint-v1";

json model_config_to_json(const ModelConfig& m) {
  return json{{"d", m.d},
              {"num_blocks", m.num_blocks},
              {"num_heads", m.num_heads},
              {"d_in_video", m.d_in_video},
              {"d_in_lang", m.d_in_lang},
              {"adapters_per_block", m.adapters_per_block},
              {"max_video_len", m.max_video_len},
              {"max_lang_len", m.max_lang_len}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.d = j.at("d").get<std::size_t>();
  m.num_blocks = j.at("num_blocks").get<std::size_t>();
  m.num_heads = j.at("num_heads").get<std::size_t>();
  m.d_in_video = j.at("d_in_video").get<std::size_t>();
  m.d_in_lang = j.at("d_in_lang").get<std::size_t>();
  m.adapters_per_block = j.at("adapters_per_block").get<std::size_t>();
  m.max_video_len = j.at("max_video_len").get<std::size_t>();
  m.max_lang_len = j.at("max_lang_len").get<std::size_t>();
  return m;
}

std::string config_hash(const FinetunedModel& model) {
  // FNV-1a over the canonical config line.
  const ModelConfig& m = model.backbone.cfg;
  const FinetuneStrategy& s = model.strategy;
  std::string canon = model_config_to_json(m).dump();
  canon += "|";
  canon += strategy_name(s.kind);
  canon += "|k=" + std::to_string(s.bottleneck) + "|r=" + std::to_string(s.rank) +
           "|p=" + std::to_string(s.prompt_len) + "|cell=" +
           cell_kind_name(s.cell_kind);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Parameters each strategy persists: its own modules, or the tuned backbone
// subset for the backbone-editing strategies ("full" keeps everything).
std::vector<std::string> saved_names(FinetunedModel& model) {
  return trainable_names(model);
}

void append_le64(std::ofstream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i)
    bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(FinetunedModel& model, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

  const std::vector<std::string> names = saved_names(model);
  json manifest;
  manifest["format"] = kFormat;
  manifest["strategy"] = strategy_name(model.strategy.kind);
  manifest["bottleneck"] = model.strategy.bottleneck;
  manifest["rank"] = model.strategy.rank;
  manifest["prompt_len"] = model.strategy.prompt_len;
  manifest["cell"] = cell_kind_name(model.strategy.cell_kind);
  manifest["config_hash"] = config_hash(model);
  manifest["backbone_hash"] = model.backbone.param_hash();
  manifest["model"] = model_config_to_json(model.backbone.cfg);

  std::ofstream blob(fs::path(dir) / "params.bin", std::ios::binary);
  if (!blob) throw IoError("cannot open " + dir + "/params.bin for writing");
  json params = json::array();
  std::size_t offset = 0;
  for (const std::string& name : names) {
    bool found = false;
    auto writer = [&](const std::string& n, Tensor& t, bool) {
      if (n != name || found) return;
      found = true;
      params.push_back(
          {{"name", n}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
      for (double v : t.data()) append_le64(blob, v);
      offset += t.numel();
    };
    model.backbone.visit(writer);
    model.attachments.visit(writer);
  }
  if (!blob) throw IoError("short write to " + dir + "/params.bin");
  manifest["params"] = std::move(params);

  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write " + dir + "/manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("short write to " + dir + "/manifest.json");
}

namespace {

json read_manifest(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("cannot open " + dir + "/manifest.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest under " + dir + ": " + e.what());
  }
  if (manifest.value("format", "") != kFormat) {
    throw CompatibilityError("unrecognized checkpoint format in " + dir);
  }
  return manifest;
}

}  // namespace

CheckpointHeader read_checkpoint_header(const std::string& dir) {
  const json manifest = read_manifest(dir);
  CheckpointHeader header;
  header.model = model_config_from_json(manifest.at("model"));
  header.strategy.kind = strategy_from_name(manifest.at("strategy").get<std::string>());
  header.strategy.bottleneck = manifest.at("bottleneck").get<std::size_t>();
  header.strategy.rank = manifest.at("rank").get<std::size_t>();
  header.strategy.prompt_len = manifest.at("prompt_len").get<std::size_t>();
  header.strategy.cell_kind =
      cell_kind_from_name(manifest.at("cell").get<std::string>());
  header.backbone_hash = manifest.at("backbone_hash").get<std::string>();
  return header;
}

void load_checkpoint(FinetunedModel& model, const std::string& dir) {
  const json manifest = read_manifest(dir);

  const std::string kind = manifest.at("strategy").get<std::string>();
  if (kind != strategy_name(model.strategy.kind)) {
    throw CompatibilityError("checkpoint was written for strategy '" + kind +
                             "', model uses '" +
                             strategy_name(model.strategy.kind) + "'");
  }
  if (manifest.at("config_hash").get<std::string>() != config_hash(model)) {
    throw CompatibilityError("checkpoint config hash does not match the model");
  }
  if (model.strategy.kind != StrategyKind::kFull) {
    // Strategy parameters only make sense on the exact frozen backbone they
    // were tuned against.
    if (manifest.at("backbone_hash").get<std::string>() !=
        model.backbone.param_hash()) {
      throw CompatibilityError(
          "checkpoint backbone hash does not match the loaded backbone");
    }
  }

  // Stage everything before mutating the model.
  struct Staged {
    Tensor target;
    std::size_t offset = 0, count = 0;
  };
  std::vector<Staged> staged;
  std::size_t total = 0;
  for (const json& p : manifest.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const Shape shape = p.at("shape").get<Shape>();
    Staged entry;
    entry.offset = p.at("offset").get<std::size_t>();
    entry.count = p.at("count").get<std::size_t>();
    bool found = false;
    auto finder = [&](const std::string& n, Tensor& t, bool) {
      if (n != name || found) return;
      found = true;
      entry.target = t;
    };
    model.backbone.visit(finder);
    model.attachments.visit(finder);
    if (!found) {
      throw CompatibilityError("checkpoint parameter '" + name +
                               "' does not exist in the model");
    }
    if (entry.target.shape() != shape) {
      throw CompatibilityError("checkpoint parameter '" + name + "' has shape " +
                               shape_str(shape) + ", model expects " +
                               shape_str(entry.target.shape()));
    }
    total += entry.count;
    staged.push_back(std::move(entry));
  }

  std::ifstream blob(fs::path(dir) / "params.bin", std::ios::binary);
  if (!blob) throw IoError("cannot open " + dir + "/params.bin");
  std::vector<unsigned char> raw(total * 8);
  blob.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
  if (blob.gcount() != static_cast<std::streamsize>(raw.size()) ||
      blob.peek() != std::ifstream::traits_type::eof()) {
    throw CompatibilityError("checkpoint blob length does not match manifest in " +
                             dir);
  }

  for (Staged& entry : staged) {
    std::vector<double>& dst = entry.target.mutable_data();
    for (std::size_t i = 0; i < entry.count; ++i)
      dst[i] = read_le64(&raw[(entry.offset + i) * 8]);
  }
}

std::uintmax_t checkpoint_byte_size(const std::string& dir) {
  std::uintmax_t total = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) total += entry.file_size();
  }
  return total;
}

}  // namespace readpvla
