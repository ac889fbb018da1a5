#pragma once

#include <compare>

namespace rapnet {

/// Normalized temporal interval [start, end) inside [0, 1].
struct TemporalSegment {
  double start = 0.0;
  double end = 0.0;

  double length() const noexcept { return end - start; }
  double center() const noexcept { return 0.5 * (start + end); }
  /// 0 <= start < end <= 1.
  bool valid() const noexcept {
    return start >= 0.0 && start < end && end <= 1.0;
  }

  friend auto operator<=>(const TemporalSegment&, const TemporalSegment&) = default;
};

/// Validating constructor; throws DomainError on an invalid interval.
TemporalSegment make_segment(double start, double end);

/// |a ∩ b| / |a ∪ b|. Degenerate inputs (start >= end) yield 0.
double segment_iou(const TemporalSegment& a, const TemporalSegment& b) noexcept;

}  // namespace rapnet
