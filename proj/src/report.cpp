#include "sparsemem/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace smem {

using nlohmann::ordered_json;

void EvalReport::add(const std::string& arm, const std::string& metric, long step, double value) {
    if (series.find(arm) == series.end()) arms.push_back(arm);
    series[arm][metric].push_back({step, value});
}

bool EvalReport::has(const std::string& arm, const std::string& metric) const {
    auto it = series.find(arm);
    return it != series.end() && it->second.find(metric) != it->second.end();
}

const std::vector<MetricPoint>& EvalReport::get(const std::string& arm,
                                                const std::string& metric) const {
    if (!has(arm, metric)) {
        throw ContractError("report: no series for arm '" + arm + "', metric '" + metric + "'");
    }
    return series.at(arm).at(metric);
}

void EvalReport::validate() const {
    for (const auto& [arm, metrics] : series) {
        for (const auto& [metric, points] : metrics) {
            for (std::size_t i = 0; i < points.size(); ++i) {
                if (!std::isfinite(points[i].value)) {
                    throw ContractError("report: non-finite value in " + arm + "/" + metric +
                                        " at step " + std::to_string(points[i].step));
                }
                if (i > 0 && points[i].step <= points[i - 1].step) {
                    throw ContractError("report: steps not strictly increasing in " + arm + "/" +
                                        metric);
                }
            }
        }
    }
}

std::vector<MetricPoint> forgetting_delta(const EvalReport& report, const std::string& arm,
                                          const std::string& metric) {
    const std::vector<MetricPoint>& src = report.get(arm, metric);
    if (src.size() < 2) {
        throw ContractError("forgetting_delta: arm '" + arm + "' has fewer than 2 eval points");
    }
    std::vector<MetricPoint> out;
    out.reserve(src.size());
    for (const MetricPoint& p : src) out.push_back({p.step, p.value - src.front().value});
    return out;
}

namespace {

// Shortest round-trip decimal form, shared between JSON and CSV output so
// the two stay consistent byte for byte.
std::string number_str(double v) { return nlohmann::json(v).dump(); }

}  // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& dir) {
    report.validate();
    std::filesystem::create_directories(dir);

    ordered_json j;
    j["schema_version"] = report.schema_version;
    j["kind"] = "report";
    j["manifest"] = report.manifest;
    j["arms"] = report.arms;
    ordered_json series = ordered_json::object();
    for (const std::string& arm : report.arms) {
        ordered_json per_arm = ordered_json::object();
        for (const auto& [metric, points] : report.series.at(arm)) {
            ordered_json rows = ordered_json::array();
            for (const MetricPoint& p : points) rows.push_back({p.step, p.value});
            per_arm[metric] = rows;
        }
        series[arm] = per_arm;
    }
    j["series"] = series;

    {
        std::ofstream out(dir / "report.json", std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + (dir / "report.json").string());
        out << j.dump(2) << "\n";
    }

    std::set<std::string> metrics;
    for (const auto& [arm, per_arm] : report.series) {
        for (const auto& [metric, points] : per_arm) metrics.insert(metric);
    }
    for (const std::string& metric : metrics) {
        std::ofstream out(dir / (metric + ".csv"), std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + (dir / (metric + ".csv")).string());
        out << "step,arm,value\n";
        for (const std::string& arm : report.arms) {
            if (!report.has(arm, metric)) continue;
            for (const MetricPoint& p : report.series.at(arm).at(metric)) {
                out << p.step << "," << arm << "," << number_str(p.value) << "\n";
            }
        }
    }
}

EvalReport load_report(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("no report at " + file.string());
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("report " + file.string() + " failed to parse: " + e.what());
    }
    if (j.value("schema_version", -1) != 1 || j.value("kind", "") != "report") {
        throw SchemaError("report " + file.string() + " has an unsupported schema");
    }
    EvalReport report;
    report.schema_version = 1;
    report.manifest = j.value("manifest", ordered_json::object());
    for (const auto& arm : j.at("arms")) {
        const std::string name = arm.get<std::string>();
        report.arms.push_back(name);
        report.series[name];
        for (const auto& [metric, rows] : j.at("series").at(name).items()) {
            std::vector<MetricPoint>& points = report.series[name][metric];
            for (const auto& row : rows) {
                points.push_back({row.at(0).get<long>(), row.at(1).get<double>()});
            }
        }
    }
    report.validate();
    return report;
}

}  // namespace smem
