#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "frigid/denoiser.hpp"

namespace frigid::model {

namespace {

constexpr char kMagic[8] = {'F', 'R', 'G', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint16_t kVersion = 1;

using Kind = CheckpointError::Kind;

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return static_cast<U>(v);
}

void put_floats(std::string& out, const nn::Mat<float>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put_le(out, std::bit_cast<std::uint32_t>(m.data()[i]));
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex;
  ss.width(16);
  ss.fill('0');
  ss << v;
  return ss.str();
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["model_config"] = nlohmann::ordered_json::parse(ck.model_config.to_json());
  header["train_config"] = nlohmann::ordered_json::parse(ck.train_config.to_json());
  header["step"] = ck.step;
  header["vocab_hash"] = hex64(ck.vocab_hash);
  header["vocab"] = ck.vocab_json.empty() ? nlohmann::ordered_json() : nlohmann::ordered_json::parse(ck.vocab_json);
  header["length_model"] =
      ck.length_model_json.empty() ? nlohmann::ordered_json() : nlohmann::ordered_json::parse(ck.length_model_json);

  std::string blob;
  auto manifest = nlohmann::ordered_json::array();
  auto add_group = [&](const std::string& prefix, const std::vector<nn::Mat<float>>* mats) {
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      const nn::Mat<float>& m = mats ? (*mats)[i] : ck.params[i].value;
      manifest.push_back({{"name", prefix + ck.params[i].name},
                          {"shape", {m.rows(), m.cols()}},
                          {"offset", blob.size()}});
      put_floats(blob, m);
    }
  };
  add_group("param/", nullptr);
  if (!ck.ema.empty()) add_group("ema/", &ck.ema);
  if (!ck.adam_m.empty()) add_group("adam_m/", &ck.adam_m);
  if (!ck.adam_v.empty()) add_group("adam_v/", &ck.adam_v);
  header["manifest"] = manifest;
  header["blob_bytes"] = blob.size();

  const std::string htext = header.dump();
  std::string out(kMagic, 8);
  put_le<std::uint16_t>(out, kVersion);
  put_le<std::uint64_t>(out, htext.size());
  out += htext;
  out += blob;

  // Write to a sibling file and rename so readers never see a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(Kind::Io, "cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(Kind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(Kind::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();
  if (data.size() < 18 || std::memcmp(data.data(), kMagic, 8) != 0) throw CheckpointError(Kind::Corrupt, "bad magic");
  if (get_le<std::uint16_t>(data, 8) != kVersion) throw CheckpointError(Kind::Corrupt, "unsupported checkpoint version");
  const auto hlen = get_le<std::uint64_t>(data, 10);
  if (hlen > data.size() - 18) throw CheckpointError(Kind::Corrupt, "truncated header");
  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(18, hlen));
    ck.model_config = ModelConfig::from_json(header.at("model_config").dump());
    ck.train_config = TrainConfig::from_json(header.at("train_config").dump());
    ck.step = header.at("step");
    ck.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
    if (!header.at("vocab").is_null()) ck.vocab_json = header.at("vocab").dump();
    if (!header.at("length_model").is_null()) ck.length_model_json = header.at("length_model").dump();
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::Corrupt, std::string("bad header: ") + e.what());
  }
  const std::size_t blob0 = 18 + hlen;
  const std::size_t blob_bytes = header.value("blob_bytes", std::size_t{0});
  if (data.size() != blob0 + blob_bytes) throw CheckpointError(Kind::Corrupt, "file length does not match header");
  if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash) {
    throw CheckpointError(Kind::ConfigMismatch, "checkpoint was trained with a different vocabulary");
  }

  // Reference model gives the expected parameter names and shapes.
  Denoiser<float> ref(ck.model_config, 0);
  const auto& rp = ref.params();
  std::map<std::string, nn::Mat<float>> blobs;
  for (const auto& e : header.at("manifest")) {
    const std::string name = e.at("name");
    const Eigen::Index rows = e.at("shape").at(0), cols = e.at("shape").at(1);
    const std::size_t off = e.at("offset");
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * 4;
    if (off + bytes > blob_bytes) throw CheckpointError(Kind::Corrupt, "blob out of bounds: " + name);
    nn::Mat<float> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = std::bit_cast<float>(get_le<std::uint32_t>(data, blob0 + off + static_cast<std::size_t>(i) * 4));
    }
    blobs.emplace(name, std::move(m));
  }
  auto take = [&](const std::string& name, const nn::Mat<float>& like) -> std::optional<nn::Mat<float>> {
    auto it = blobs.find(name);
    if (it == blobs.end()) return std::nullopt;
    if (it->second.rows() != like.rows() || it->second.cols() != like.cols()) {
      throw CheckpointError(Kind::ConfigMismatch, "shape mismatch for " + name);
    }
    return std::move(it->second);
  };
  bool have_ema = true, have_m = true, have_v = true;
  for (const auto& p : rp) {
    auto v = take("param/" + p.name, p.value);
    if (!v) throw CheckpointError(Kind::Corrupt, "missing parameter " + p.name);
    ck.params.push_back({p.name, std::move(*v), nn::Mat<float>::Zero(p.value.rows(), p.value.cols())});
    auto e = take("ema/" + p.name, p.value);
    auto m = take("adam_m/" + p.name, p.value);
    auto s = take("adam_v/" + p.name, p.value);
    have_ema = have_ema && e.has_value();
    have_m = have_m && m.has_value();
    have_v = have_v && s.has_value();
    if (e) ck.ema.push_back(std::move(*e));
    if (m) ck.adam_m.push_back(std::move(*m));
    if (s) ck.adam_v.push_back(std::move(*s));
  }
  if (!have_ema) ck.ema.clear();
  if (!have_m || !have_v) {
    ck.adam_m.clear();
    ck.adam_v.clear();
  }
  return ck;
}

Checkpoint make_checkpoint(const Trainer& trainer, const tok::Vocabulary& v, const std::string& length_model_json) {
  const Trainer& t = trainer;
  Checkpoint ck;
  ck.model_config = t.model().config();
  ck.train_config = t.config();
  ck.step = t.step();
  ck.vocab_json = v.to_json();
  ck.vocab_hash = v.hash();
  ck.length_model_json = length_model_json;
  ck.params = t.model().params();
  ck.ema = t.ema();
  ck.adam_m = t.adam_m();
  ck.adam_v = t.adam_v();
  return ck;
}

std::unique_ptr<Denoiser<float>> model_from_checkpoint(const Checkpoint& ck, bool use_ema) {
  auto model = std::make_unique<Denoiser<float>>(ck.model_config, 0);
  const bool ema = use_ema && ck.ema.size() == ck.params.size();
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    model->params()[i].value = ema ? ck.ema[i] : ck.params[i].value;
  }
  return model;
}

void restore_trainer(const Checkpoint& ck, Trainer& trainer) {
  auto& ps = trainer.model().params();
  if (ps.size() != ck.params.size()) throw CheckpointError(Kind::ConfigMismatch, "parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].value = ck.params[i].value;
  if (ck.ema.size() == ps.size()) trainer.ema() = ck.ema;
  if (ck.adam_m.size() == ps.size()) {
    trainer.adam_m() = ck.adam_m;
    trainer.adam_v() = ck.adam_v;
  }
  trainer.set_step(ck.step);
}

}  // namespace frigid::model
