#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"

namespace lnmt {

/// Architecture of the encoder-decoder. Defaults are the desk-scale
/// settings; they train the synthetic cipher tasks on a CPU in minutes.
struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 128;
  double dropout = 0.1;
  int max_len = 64;
  int src_vocab_size = 4;
  int tgt_vocab_size = 4;
  std::uint64_t seed = 1;
  bool shared_src_tgt_embeddings = false;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw InvalidArgument(std::string("model config: ") + name + " must be positive");
    };
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(n_enc_layers, "n_enc_layers");
    positive(n_dec_layers, "n_dec_layers");
    positive(d_ff, "d_ff");
    positive(max_len, "max_len");
    if (d_model % n_heads != 0) {
      throw InvalidArgument("model config: d_model=" + std::to_string(d_model) + " is not divisible by n_heads=" +
                            std::to_string(n_heads));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("model config: dropout must lie in [0,1)");
    if (src_vocab_size < 4 || tgt_vocab_size < 4) {
      throw InvalidArgument("model config: vocabulary sizes must be at least 4 (reserved tokens)");
    }
    if (shared_src_tgt_embeddings && src_vocab_size != tgt_vocab_size) {
      throw InvalidArgument("model config: shared embeddings need equal source/target vocabulary sizes");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"n_enc_layers", c.n_enc_layers},
                     {"n_dec_layers", c.n_dec_layers},
                     {"d_ff", c.d_ff},
                     {"dropout", c.dropout},
                     {"max_len", c.max_len},
                     {"src_vocab_size", c.src_vocab_size},
                     {"tgt_vocab_size", c.tgt_vocab_size},
                     {"seed", c.seed},
                     {"shared_src_tgt_embeddings", c.shared_src_tgt_embeddings}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_enc_layers = j.value("n_enc_layers", d.n_enc_layers);
  c.n_dec_layers = j.value("n_dec_layers", d.n_dec_layers);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.dropout = j.value("dropout", d.dropout);
  c.max_len = j.value("max_len", d.max_len);
  c.src_vocab_size = j.value("src_vocab_size", d.src_vocab_size);
  c.tgt_vocab_size = j.value("tgt_vocab_size", d.tgt_vocab_size);
  c.seed = j.value("seed", d.seed);
  c.shared_src_tgt_embeddings = j.value("shared_src_tgt_embeddings", d.shared_src_tgt_embeddings);
}

}  // namespace lnmt
