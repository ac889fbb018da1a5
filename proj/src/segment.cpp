#include "rapnet/segment.hpp"

#include <algorithm>
#include <string>

#include "rapnet/error.hpp"

namespace rapnet {

TemporalSegment make_segment(double start, double end) {
  TemporalSegment s{start, end};
  if (!s.valid()) {
    throw DomainError("invalid segment [" + std::to_string(start) + ", " +
                      std::to_string(end) + ")");
  }
  return s;
}

double segment_iou(const TemporalSegment& a, const TemporalSegment& b) noexcept {
  if (!(a.start < a.end) || !(b.start < b.end)) return 0.0;
  const double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter <= 0.0) return 0.0;
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return inter / uni;
}

}  // namespace rapnet
