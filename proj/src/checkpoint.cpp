#include "ditflow/checkpoint.hpp"

#include <fstream>

#include "ditflow/errors.hpp"
#include "ditflow/vtns.hpp"

namespace ditflow {

namespace fs = std::filesystem;
using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"frames", c.frames},   {"channels", c.channels}, {"height", c.height},         {"width", c.width},
              {"patch", c.patch},     {"dim", c.dim},           {"heads", c.heads},           {"blocks", c.blocks},
              {"steps", c.steps},     {"cond_vocab", c.cond_vocab}, {"mlp_ratio", c.mlp_ratio}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  auto field = [&](const char* name, std::size_t& out) {
    if (!j.contains(name) || !j.at(name).is_number_unsigned())
      throw ConfigError(std::string("model config: missing or invalid field '") + name + "'");
    out = j.at(name).get<std::size_t>();
  };
  field("frames", c.frames);
  field("channels", c.channels);
  field("height", c.height);
  field("width", c.width);
  field("patch", c.patch);
  field("dim", c.dim);
  field("heads", c.heads);
  field("blocks", c.blocks);
  field("steps", c.steps);
  field("cond_vocab", c.cond_vocab);
  field("mlp_ratio", c.mlp_ratio);
  c.validate();
  return c;
}

void save_checkpoint(const fs::path& dir, const DiTModel<float>& model, const json& extra) {
  fs::create_directories(dir / "tensors");
  json tensors = json::object();
  const auto names = model.parameter_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string file = "tensors/" + names[i] + ".vtns";
    vtns::save(dir / file, model.parameters()[i]);
    tensors[names[i]] = file;
  }
  json manifest{{"format", kCheckpointFormat},
                {"config", config_to_json(model.config())},
                {"geometry_hash", model.config().geometry_hash()},
                {"weights_checksum", model.weights_checksum()},
                {"tensors", tensors},
                {"info", extra}};
  vtns::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

DiTModel<float> load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw FormatError("checkpoint manifest not found: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(vtns::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat)
    throw FormatError("checkpoint manifest " + manifest_path.string() + ": unsupported format");
  const ModelConfig cfg = config_from_json(manifest.at("config"));
  // Names depend only on the config; a throwaway model supplies them.
  const auto names = DiTModel<float>(cfg, 0).parameter_names();
  std::vector<Tensor<float>> params;
  params.reserve(names.size());
  for (const auto& name : names) {
    if (!manifest["tensors"].contains(name)) throw FormatError("checkpoint is missing tensor " + name);
    const fs::path file = dir / manifest["tensors"][name].get<std::string>();
    if (!fs::exists(file)) throw FormatError("checkpoint tensor file not found: " + file.string());
    params.push_back(vtns::load<float>(file));
  }
  DiTModel<float> model(cfg, std::move(params));
  if (manifest.contains("weights_checksum") &&
      manifest["weights_checksum"].get<std::uint64_t>() != model.weights_checksum())
    throw FormatError("checkpoint " + dir.string() + ": weights checksum mismatch");
  return model;
}

}  // namespace ditflow
