#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sparsemem/errors.hpp"

namespace smem {

inline constexpr const char* kMetricTargetAccuracy = "target_accuracy";
inline constexpr const char* kMetricHeldoutLoss = "heldout_loss";
inline constexpr const char* kMetricGeneralLoss = "general_loss";
inline constexpr const char* kMetricForgetting = "forgetting_delta";

struct MetricPoint {
    long step = 0;
    double value = 0.0;

    bool operator==(const MetricPoint&) const = default;
};

// Per-arm metric series for the finetuning comparison, plus a free-form
// manifest echoing the run configuration. Arms keep insertion order so
// emission is deterministic.
struct EvalReport {
    int schema_version = 1;
    nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
    std::vector<std::string> arms;
    std::map<std::string, std::map<std::string, std::vector<MetricPoint>>> series;

    void add(const std::string& arm, const std::string& metric, long step, double value);
    bool has(const std::string& arm, const std::string& metric) const;
    const std::vector<MetricPoint>& get(const std::string& arm,
                                        const std::string& metric) const;  // ContractError

    // Steps strictly increasing per (arm, metric); every value finite.
    void validate() const;
};

// value(step) - value(first step), one point per step of the source
// series. Needs at least two points.
std::vector<MetricPoint> forgetting_delta(const EvalReport& report, const std::string& arm,
                                          const std::string& metric = kMetricGeneralLoss);

// Writes dir/report.json plus one <metric>.csv per metric with columns
// step,arm,value: arms in report order, steps ascending, LF endings.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

EvalReport load_report(const std::filesystem::path& file);  // SchemaError on mismatch

}  // namespace smem
