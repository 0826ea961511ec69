#pragma once

// Flow agreement, flow smoothness, and the consolidated run report.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ditflow/amf.hpp"

namespace ditflow::eval {

/// Which (i, j, patch) entries are evaluated.
///   all: every entry.
///   reference_nonzero: entries where the comparison flow (second argument)
///     is nonzero.
///   valid_mask: entries whose source patch is valid in the given mask.
enum class MaskPolicy { all, reference_nonzero, valid_mask };

std::string_view policy_name(MaskPolicy p) noexcept;
/// Throws ConfigError on an unknown name.
MaskPolicy parse_policy(std::string_view name);

struct AgreementReport {
  double mean_cosine = 0;     // over evaluated entries that are not zero-vs-zero
  double mean_epe = 0;        // endpoint error in cells over evaluated entries
  double exact_fraction = 0;  // evaluated entries with identical vectors
  std::size_t evaluated = 0;
  std::size_t cosine_count = 0;
  MaskPolicy policy = MaskPolicy::reference_nonzero;
};

nlohmann::json report_to_json(const AgreementReport& r);

/// Compares `a` against the comparison flow `b`. A zero vector against a
/// nonzero one has cosine 0. With no cosine entries the cosine is 1 (every
/// evaluated entry is zero-vs-zero). `mask` is [F * S] and is required for
/// valid_mask. Throws ShapeError on a geometry mismatch.
AgreementReport displacement_agreement(const amf::MotionFlow& a, const amf::MotionFlow& b, MaskPolicy policy,
                                       const std::vector<std::uint8_t>* mask = nullptr, bool include_diagonal = true);

/// Fraction of mask-valid off-diagonal entries whose components both lie
/// within `cells` of the comparison.
double within_cells_fraction(const amf::MotionFlow& a, const amf::MotionFlow& b, const std::vector<std::uint8_t>& mask,
                             double cells = 1.0);

/// Sum over frame pairs and 4-neighbour patch pairs of the L1 difference of
/// displacement vectors.
double total_variation(const amf::MotionFlow& flow);

/// Inputs to run_report. Paths are relative to the report's base directory
/// or absolute.
struct ReportInputs {
  std::filesystem::path reference_flow;  // hard flow of the reference
  std::filesystem::path guided_flow;
  std::filesystem::path unguided_flow;
  std::filesystem::path zero_shot_flow;  // optional
  std::filesystem::path nn_flow;         // optional
  std::filesystem::path loss_trace;      // optional CSV t,inner_step,loss,lr
  MaskPolicy policy = MaskPolicy::reference_nonzero;
};

struct ReportBundle {
  nlohmann::json report;  // schema "evalkit/1"
  std::string csv;        // method,mean_cosine,mean_epe,exact_fraction,evaluated,total_variation
};

/// Throws FormatError naming the first missing artifact.
ReportBundle run_report(const ReportInputs& in);

/// CSV columns of ReportBundle::csv.
inline constexpr const char* kReportCsvHeader = "method,mean_cosine,mean_epe,exact_fraction,evaluated,total_variation";

}  // namespace ditflow::eval
