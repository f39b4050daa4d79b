#pragma once

#include <vector>

#include "lesionseg/cascade.hpp"
#include "lesionseg/metrics.hpp"

namespace lesionseg {

/// Reference to score against: the expert lesion annotation carried by each
/// case, or supplied silver masks (a trusted model's outputs standing in for
/// expert labels).
enum class ReferenceKind { expert, silver };

inline ReferenceKind reference_from_name(const std::string& s) {
  if (s == "expert") return ReferenceKind::expert;
  if (s == "silver") return ReferenceKind::silver;
  throw std::invalid_argument("unknown reference kind: " + s);
}

/// Runs infer + postprocess per case and scores DSC / lesion sensitivity /
/// lesion precision against the chosen reference, with mean and standard
/// deviation aggregates.
inline MetricsReport evaluate(const CascadeModel& cascade, const std::vector<Case>& cases,
                              ReferenceKind reference,
                              const std::vector<Volume>* silver_masks = nullptr,
                              std::size_t batch_size = 8192) {
  if (reference == ReferenceKind::silver) {
    if (silver_masks == nullptr || silver_masks->size() != cases.size()) {
      throw std::invalid_argument("evaluate: silver reference requires one mask per case");
    }
  }
  MetricsReport report;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Case& c = cases[i];
    const Volume* ref = nullptr;
    if (reference == ReferenceKind::expert) {
      if (!c.lesion_mask) {
        throw std::invalid_argument("evaluate: case " + c.id +
                                    " has no expert lesion annotation");
      }
      ref = &*c.lesion_mask;
    } else {
      ref = &(*silver_masks)[i];
      if (ref->data.shape() != c.flair.data.shape()) {
        throw std::invalid_argument("evaluate: silver mask shape mismatch for case " +
                                    c.id);
      }
    }
    const Volume prob = infer(cascade, c, batch_size);
    const Volume seg = postprocess(prob, cascade.post);
    report.cases.push_back(case_metrics(c.id, *ref, seg, cascade.post.connectivity));
  }
  report.aggregate();
  return report;
}

}  // namespace lesionseg
