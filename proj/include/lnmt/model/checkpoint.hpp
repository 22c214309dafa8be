#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/core/hash.hpp"
#include "lnmt/corpus/vocabulary.hpp"
#include "lnmt/model/fisher.hpp"
#include "lnmt/model/optimizer.hpp"
#include "lnmt/model/transformer.hpp"

namespace lnmt {

inline constexpr int kCheckpointFormatVersion = 1;

/// Everything needed to resume from or reuse a trained model.
struct Checkpoint {
  Transformer<float> model;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  std::optional<AdamState<float>> opt;
  std::optional<FisherDiag<float>> fisher;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline void append_floats(std::string& blob, const ParamSet<float>& ps) {
  for (const auto& t : ps.tensors) {
    blob.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
  }
}

inline std::size_t read_floats(const std::string& blob, std::size_t offset, ParamSet<float>& ps,
                               const std::string& file) {
  for (auto& t : ps.tensors) {
    const std::size_t n = static_cast<std::size_t>(t.size()) * sizeof(float);
    if (offset + n > blob.size()) throw IoError("checksum error: " + file + " is truncated");
    std::memcpy(t.data(), blob.data() + offset, n);
    offset += n;
  }
  return offset;
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + p.string());
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::string blob_checksum(const std::string& bytes) {
  Fnv1a h;
  h.update(bytes.data(), bytes.size());
  return to_hex(h.digest());
}

inline std::string checked_blob(const std::filesystem::path& dir, const std::string& name,
                                const nlohmann::json& manifest) {
  auto bytes = read_file(dir / name);
  const auto expected = manifest.at("checksums").at(name).get<std::string>();
  if (blob_checksum(bytes) != expected) {
    throw IoError("checksum error: " + (dir / name).string() + " does not match its manifest checksum");
  }
  return bytes;
}

}  // namespace detail

/// Writes `manifest`, `params.bin`, optional `opt.bin`/`fisher.bin`, and the
/// two vocabulary files into `dir`. Blobs are little-endian float32 arrays
/// concatenated in manifest order.
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  const auto& params = ck.model.params();
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = ck.model.config();
  auto& arrays = manifest["arrays"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.push_back({{"name", params.names[i]}, {"rows", params[i].rows()}, {"cols", params[i].cols()}});
  }
  std::string blob;
  detail::append_floats(blob, params);
  detail::write_file(dir / "params.bin", blob);
  manifest["checksums"]["params.bin"] = detail::blob_checksum(blob);
  manifest["param_checksum"] = to_hex(ck.model.checksum());

  if (ck.opt) {
    std::string ob;
    detail::append_floats(ob, ck.opt->m);
    detail::append_floats(ob, ck.opt->v);
    detail::write_file(dir / "opt.bin", ob);
    manifest["checksums"]["opt.bin"] = detail::blob_checksum(ob);
    manifest["optimizer"] = {{"step", ck.opt->step}, {"config", ck.opt->config}};
  }
  if (ck.fisher) {
    std::string fb;
    detail::append_floats(fb, ck.fisher->fisher);
    detail::append_floats(fb, ck.fisher->anchor);
    detail::write_file(dir / "fisher.bin", fb);
    manifest["checksums"]["fisher.bin"] = detail::blob_checksum(fb);
    manifest["fisher"] = {{"sample_count", ck.fisher->sample_count}};
  }
  ck.src_vocab.save((dir / "src.vocab").string());
  ck.tgt_vocab.save((dir / "tgt.vocab").string());
  manifest["vocabs"] = {{"src", {{"file", "src.vocab"}, {"lang", ck.src_vocab.lang()}}},
                        {"tgt", {{"file", "tgt.vocab"}, {"lang", ck.tgt_vocab.lang()}}}};
  manifest["checksums"]["src.vocab"] = detail::blob_checksum(detail::read_file(dir / "src.vocab"));
  manifest["checksums"]["tgt.vocab"] = detail::blob_checksum(detail::read_file(dir / "tgt.vocab"));
  manifest["extra"] = ck.extra;
  detail::write_file(dir / "manifest", manifest.dump(2) + "\n");
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto text = detail::read_file(dir / "manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw IoError("checkpoint format version mismatch in " + dir.string() + ": found " + std::to_string(version) +
                  ", expected " + std::to_string(kCheckpointFormatVersion));
  }
  return manifest;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  const ModelConfig config = manifest.at("config").get<ModelConfig>();
  Transformer<float> shape(config);
  ParamSet<float> params = shape.params().zeros_like();
  const auto& arrays = manifest.at("arrays");
  if (arrays.size() != params.size()) throw IoError("manifest array list does not match the model layout");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (arrays[i].at("name").get<std::string>() != params.names[i] ||
        arrays[i].at("rows").get<Eigen::Index>() != params[i].rows() ||
        arrays[i].at("cols").get<Eigen::Index>() != params[i].cols()) {
      throw IoError("manifest array " + std::to_string(i) + " does not match the model layout");
    }
  }
  const auto pblob = detail::checked_blob(dir, "params.bin", manifest);
  if (detail::read_floats(pblob, 0, params, "params.bin") != pblob.size()) {
    throw IoError("checksum error: params.bin has trailing bytes");
  }
  Checkpoint ck{Transformer<float>(config, std::move(params)), Vocabulary(), Vocabulary(), std::nullopt,
                std::nullopt, manifest.value("extra", nlohmann::json::object())};
  detail::checked_blob(dir, "src.vocab", manifest);
  detail::checked_blob(dir, "tgt.vocab", manifest);
  ck.src_vocab = Vocabulary::load((dir / "src.vocab").string(), manifest["vocabs"]["src"].value("lang", ""));
  ck.tgt_vocab = Vocabulary::load((dir / "tgt.vocab").string(), manifest["vocabs"]["tgt"].value("lang", ""));

  if (manifest.contains("optimizer")) {
    const auto ob = detail::checked_blob(dir, "opt.bin", manifest);
    AdamState<float> opt(manifest["optimizer"].at("config").get<AdamConfig>(), ck.model.params());
    opt.step = manifest["optimizer"].at("step").get<std::int64_t>();
    auto off = detail::read_floats(ob, 0, opt.m, "opt.bin");
    off = detail::read_floats(ob, off, opt.v, "opt.bin");
    if (off != ob.size()) throw IoError("checksum error: opt.bin has trailing bytes");
    ck.opt = std::move(opt);
  }
  if (manifest.contains("fisher")) {
    const auto fb = detail::checked_blob(dir, "fisher.bin", manifest);
    FisherDiag<float> f{ck.model.params().zeros_like(), ck.model.params().zeros_like(),
                        manifest["fisher"].at("sample_count").get<std::size_t>()};
    auto off = detail::read_floats(fb, 0, f.fisher, "fisher.bin");
    off = detail::read_floats(fb, off, f.anchor, "fisher.bin");
    if (off != fb.size()) throw IoError("checksum error: fisher.bin has trailing bytes");
    ck.fisher = std::move(f);
  }
  return ck;
}

}  // namespace lnmt
