#include "ditflow/evalkit.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ditflow/errors.hpp"
#include "ditflow/vtns.hpp"

namespace ditflow::eval {

namespace fs = std::filesystem;
using amf::MotionFlow;
using nlohmann::json;

std::string_view policy_name(MaskPolicy p) noexcept {
  switch (p) {
    case MaskPolicy::all: return "all";
    case MaskPolicy::reference_nonzero: return "reference_nonzero";
    case MaskPolicy::valid_mask: return "valid_mask";
  }
  return "?";
}

MaskPolicy parse_policy(std::string_view name) {
  if (name == "all") return MaskPolicy::all;
  if (name == "reference_nonzero") return MaskPolicy::reference_nonzero;
  if (name == "valid_mask") return MaskPolicy::valid_mask;
  throw ConfigError("unknown mask policy '" + std::string(name) + "'");
}

json report_to_json(const AgreementReport& r) {
  return {{"mean_cosine", r.mean_cosine},   {"mean_epe", r.mean_epe},         {"exact_fraction", r.exact_fraction},
          {"evaluated", r.evaluated},       {"cosine_count", r.cosine_count}, {"policy", policy_name(r.policy)}};
}

namespace {

void require_same(const MotionFlow& a, const MotionFlow& b) {
  if (!a.same_geometry(b) || a.delta.dims() != b.delta.dims())
    throw ShapeError("flow geometries differ: " + to_string(a.delta.dims()) + " vs " + to_string(b.delta.dims()));
}

void require_mask(const MotionFlow& a, const std::vector<std::uint8_t>* mask) {
  if (!mask) throw ConfigError("valid_mask policy needs a mask");
  if (mask->size() != a.frames * a.grid.size())
    throw ShapeError("mask has " + std::to_string(mask->size()) + " entries, expected " +
                     std::to_string(a.frames * a.grid.size()));
}

}  // namespace

AgreementReport displacement_agreement(const MotionFlow& a, const MotionFlow& b, MaskPolicy policy,
                                       const std::vector<std::uint8_t>* mask, bool include_diagonal) {
  require_same(a, b);
  if (policy == MaskPolicy::valid_mask) require_mask(a, mask);
  const std::size_t f = a.frames, s = a.grid.size();
  AgreementReport r;
  r.policy = policy;
  double cos_sum = 0.0, epe_sum = 0.0;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      if (i == j && !include_diagonal) continue;
      for (std::size_t p = 0; p < s; ++p) {
        const std::size_t o = a.offset(i, j, p);
        const double au = a.delta[o], av = a.delta[o + 1], bu = b.delta[o], bv = b.delta[o + 1];
        const bool b_zero = bu == 0.0 && bv == 0.0, a_zero = au == 0.0 && av == 0.0;
        if (policy == MaskPolicy::reference_nonzero && b_zero) continue;
        if (policy == MaskPolicy::valid_mask && !(*mask)[i * s + p]) continue;
        ++r.evaluated;
        epe_sum += std::hypot(au - bu, av - bv);
        if (au == bu && av == bv) ++exact;
        if (a_zero && b_zero) continue;
        ++r.cosine_count;
        if (!a_zero && !b_zero) cos_sum += (au * bu + av * bv) / (std::hypot(au, av) * std::hypot(bu, bv));
      }
    }
  r.mean_cosine = r.cosine_count ? cos_sum / double(r.cosine_count) : 1.0;
  r.mean_epe = r.evaluated ? epe_sum / double(r.evaluated) : 0.0;
  r.exact_fraction = r.evaluated ? double(exact) / double(r.evaluated) : 1.0;
  return r;
}

double within_cells_fraction(const MotionFlow& a, const MotionFlow& b, const std::vector<std::uint8_t>& mask,
                             double cells) {
  require_same(a, b);
  require_mask(a, &mask);
  const std::size_t f = a.frames, s = a.grid.size();
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      if (i == j) continue;
      for (std::size_t p = 0; p < s; ++p) {
        if (!mask[i * s + p]) continue;
        const std::size_t o = a.offset(i, j, p);
        ++total;
        hits += std::abs(a.delta[o] - b.delta[o]) <= cells && std::abs(a.delta[o + 1] - b.delta[o + 1]) <= cells;
      }
    }
  return total ? double(hits) / double(total) : 0.0;
}

double total_variation(const MotionFlow& flow) {
  const std::size_t f = flow.frames;
  const auto& g = flow.grid;
  double tv = 0.0;
  auto l1 = [&](std::size_t i, std::size_t j, std::size_t p, std::size_t q) {
    const std::size_t op = flow.offset(i, j, p), oq = flow.offset(i, j, q);
    return std::abs(flow.delta[op] - flow.delta[oq]) + std::abs(flow.delta[op + 1] - flow.delta[oq + 1]);
  };
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < f; ++j)
      for (std::size_t v = 0; v < g.rows; ++v)
        for (std::size_t u = 0; u < g.cols; ++u) {
          const std::size_t p = g.index(u, v);
          if (u + 1 < g.cols) tv += l1(i, j, p, g.index(u + 1, v));
          if (v + 1 < g.rows) tv += l1(i, j, p, g.index(u, v + 1));
        }
  return tv;
}

namespace {

MotionFlow load_required(const fs::path& path, const char* what) {
  if (path.empty()) throw FormatError(std::string("missing artifact: no path given for ") + what);
  if (!fs::exists(path)) throw FormatError("missing artifact: " + path.string());
  if (!fs::exists(amf::sidecar_path(path))) throw FormatError("missing artifact: " + amf::sidecar_path(path).string());
  return amf::load_flow(path);
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

}  // namespace

ReportBundle run_report(const ReportInputs& in) {
  const MotionFlow ref = load_required(in.reference_flow, "reference flow");
  struct Method {
    std::string name;
    MotionFlow flow;
  };
  std::vector<Method> methods;
  methods.push_back({"guided", load_required(in.guided_flow, "guided flow")});
  methods.push_back({"unguided", load_required(in.unguided_flow, "unguided flow")});
  if (!in.zero_shot_flow.empty()) methods.push_back({"zero_shot", load_required(in.zero_shot_flow, "zero-shot flow")});
  if (!in.nn_flow.empty()) methods.push_back({"nn_baseline", load_required(in.nn_flow, "nearest-neighbour flow")});

  json report{{"schema", "evalkit/1"}, {"policy", policy_name(in.policy)}};
  report["reference"] = {{"path", in.reference_flow.generic_string()}, {"total_variation", total_variation(ref)}};
  json methods_json = json::object();
  std::string csv = std::string(kReportCsvHeader) + "\n";
  double unguided_cos = 0.0;
  for (const auto& m : methods) {
    const auto r = displacement_agreement(m.flow, ref, in.policy);
    const double tv = total_variation(m.flow);
    json entry = report_to_json(r);
    entry["total_variation"] = tv;
    methods_json[m.name] = entry;
    if (m.name == "unguided") unguided_cos = r.mean_cosine;
    csv += m.name + "," + fmt(r.mean_cosine) + "," + fmt(r.mean_epe) + "," + fmt(r.exact_fraction) + "," +
           std::to_string(r.evaluated) + "," + fmt(tv) + "\n";
  }
  report["methods"] = methods_json;
  json margins = json::object();
  for (const auto& m : methods)
    if (m.name != "unguided") margins[m.name] = methods_json[m.name]["mean_cosine"].get<double>() - unguided_cos;
  report["margins_vs_unguided"] = margins;

  if (!in.loss_trace.empty()) {
    if (!fs::exists(in.loss_trace)) throw FormatError("missing artifact: " + in.loss_trace.string());
    std::istringstream lines(vtns::read_file(in.loss_trace));
    std::string line;
    std::getline(lines, line);  // header
    std::size_t rows = 0;
    double first = 0.0, last = 0.0;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::string t, k, loss;
      std::getline(fields, t, ',');
      std::getline(fields, k, ',');
      std::getline(fields, loss, ',');
      const double v = std::stod(loss);
      if (rows == 0) first = v;
      last = v;
      ++rows;
    }
    report["loss_trace"] = {{"rows", rows}, {"first_loss", first}, {"last_loss", last}};
  }
  return {report, csv};
}

}  // namespace ditflow::eval
