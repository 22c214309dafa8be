#pragma once

#include <cstddef>

#include "lnmt/core/error.hpp"
#include "lnmt/model/params.hpp"

namespace lnmt {

/// Diagonal Fisher information with the parameter snapshot it anchors to.
template <typename S>
struct FisherDiag {
  ParamSet<S> fisher;
  ParamSet<S> anchor;
  std::size_t sample_count = 0;

  /// Grows to the shapes of `params` (after vocabulary expansion). New
  /// entries carry zero Fisher weight and anchor at the current values.
  FisherDiag expanded_to(const ParamSet<S>& params) const {
    if (params.size() != fisher.size()) throw InvalidArgument("Fisher store does not match model layout");
    FisherDiag out{params.zeros_like(), params, sample_count};
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& f = fisher[i];
      if (f.rows() > params[i].rows() || f.cols() > params[i].cols()) {
        throw InvalidArgument("Fisher array " + fisher.names[i] + " is larger than the model's");
      }
      out.fisher[i].topLeftCorner(f.rows(), f.cols()) = f;
      out.anchor[i].topLeftCorner(f.rows(), f.cols()) = anchor[i];
    }
    return out;
  }
};

}  // namespace lnmt
