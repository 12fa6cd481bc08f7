#include "fx/run_log.hpp"

#include <cstdio>
#include <stdexcept>

#include <json.hpp>

namespace fx {
namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    return os;
}

}  // namespace

std::string format_double(double v) {
    char buf[32];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

MetricsLog::MetricsLog(const std::filesystem::path& csv, const std::filesystem::path& jsonl)
    : csv_(open_out(csv)), jsonl_(open_out(jsonl)) {
    csv_ << kHeader << '\n' << std::flush;
}

void MetricsLog::write(const MetricsRecord& r) {
    csv_ << r.cycle << ',' << r.epoch << ',' << r.dataset << ',' << r.task << ',' << to_string(r.mode) << ',' << r.metric << ','
         << format_double(r.value) << '\n'
         << std::flush;
    nlohmann::ordered_json j{{"cycle", r.cycle}, {"epoch", r.epoch},   {"dataset", r.dataset}, {"task", r.task},
                             {"mode", to_string(r.mode)}, {"metric", r.metric}, {"value", r.value}};
    jsonl_ << j.dump() << '\n' << std::flush;
}

EpochLog::EpochLog(const std::filesystem::path& csv) : csv_(open_out(csv)) { csv_ << kHeader << '\n' << std::flush; }

void EpochLog::write(const EpochSummary& s) {
    const auto& terms = s.result.mean_loss.consistency_terms;
    const auto term = [&](std::size_t i) { return i < terms.size() ? format_double(terms[i].second) : std::string(); };
    csv_ << s.cycle << ',' << s.epoch << ',' << s.entry.dataset << ',' << s.entry.task_label() << ',' << to_string(s.entry.mode) << ','
         << to_string(s.entry.fraction) << ',' << s.result.samples_used << ',' << s.result.steps << ','
         << format_double(s.result.mean_loss.task_loss) << ',' << term(0) << ',' << term(1) << ','
         << format_double(s.result.mean_loss.total) << '\n'
         << std::flush;
}

}  // namespace fx
