#include "xmreid/trainer.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace xmreid {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native little-endian order");
static_assert(sizeof(Real) == 4, "checkpoint blobs hold float32");

namespace {

constexpr const char* kFormat = "xmreid-checkpoint";
constexpr int kVersion = 1;

// Every tensor of the state, in blob order, with a stable name.
template <typename State, typename F>
void visit_tensors(State& s, F&& f) {
  s.live.for_each([&](const std::string& n, auto& m) { f("live." + n, m); });
  s.shadow.params.for_each([&](const std::string& n, auto& m) { f("shadow." + n, m); });
  s.optimizer.m.for_each([&](const std::string& n, auto& m) { f("adam_m." + n, m); });
  s.optimizer.v.for_each([&](const std::string& n, auto& m) { f("adam_v." + n, m); });
  for (int i = 0; i < 3; ++i) {
    f("bank.high." + std::to_string(i), s.bank.high[static_cast<std::size_t>(i)]);
    f("bank.global." + std::to_string(i), s.bank.global[static_cast<std::size_t>(i)]);
  }
}

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  return p.replace_extension(".bin");
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const std::filesystem::path blob = blob_path(path);
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<Real> data;
  visit_tensors(state, [&](const std::string& name, const Matrix<Real>& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", data.size()}});
    data.insert(data.end(), m.data(), m.data() + m.size());
  });
  std::vector<bool> init = state.bank.initialized;
  nlohmann::json j = {{"format", kFormat},
                      {"version", kVersion},
                      {"blob", blob.filename().string()},
                      {"dtype", "float32-le"},
                      {"iteration", state.iteration},
                      {"optimizer_step", state.optimizer.step},
                      {"classes", state.config.encoder.classes},
                      {"bank_initialized", init},
                      {"config_hash", state.config.hash()},
                      {"config", state.config.to_json()},
                      {"total_values", data.size()},
                      {"tensors", tensors}};
  std::ofstream out(blob, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + blob.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(Real)));
  if (!out) throw std::runtime_error("write failed: " + blob.string());
  std::ofstream man(path);
  man << j.dump(2) << '\n';
  if (!man) throw std::runtime_error("write failed: " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw std::runtime_error(std::string("checkpoint: missing field '") + key + "'");
    return j.at(key);
  };
  if (field("format") != kFormat || field("version") != kVersion) throw std::runtime_error("checkpoint: unsupported format or version");

  const TrainConfig config = TrainConfig::from_json(field("config"));
  if (config.hash() != field("config_hash").get<std::string>())
    throw std::runtime_error("checkpoint: config hash does not match the stored config");
  TrainState s = init_state(config, field("classes").get<Index>());
  s.iteration = field("iteration").get<long>();
  s.optimizer.step = field("optimizer_step").get<long>();
  s.bank.initialized = field("bank_initialized").get<std::vector<bool>>();
  if (static_cast<Index>(s.bank.initialized.size()) != s.bank.classes) throw std::runtime_error("checkpoint: bank_initialized has the wrong length");

  const std::filesystem::path blob = path.parent_path() / field("blob").get<std::string>();
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint: missing blob " + blob.string());
  const std::size_t total = field("total_values").get<std::size_t>();
  std::vector<Real> data(total);
  bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(total * sizeof(Real)));
  if (static_cast<std::size_t>(bin.gcount()) != total * sizeof(Real) || bin.peek() != EOF)
    throw std::runtime_error("checkpoint: blob " + blob.string() + " does not hold " + std::to_string(total) + " float32 values");

  std::map<std::string, nlohmann::json> index;
  for (const auto& t : field("tensors")) index[t.at("name").get<std::string>()] = t;
  visit_tensors(s, [&](const std::string& name, Matrix<Real>& m) {
    auto it = index.find(name);
    if (it == index.end()) throw std::runtime_error("checkpoint: tensor '" + name + "' missing from manifest");
    const Index rows = it->second.at("rows").get<Index>(), cols = it->second.at("cols").get<Index>();
    const std::size_t offset = it->second.at("offset").get<std::size_t>();
    if (rows != m.rows() || cols != m.cols()) throw std::runtime_error("checkpoint: tensor '" + name + "' has the wrong shape");
    if (offset + static_cast<std::size_t>(rows * cols) > total) throw std::runtime_error("checkpoint: tensor '" + name + "' runs past the blob");
    std::memcpy(m.data(), data.data() + offset, static_cast<std::size_t>(rows * cols) * sizeof(Real));
  });
  return s;
}

}  // namespace xmreid
