#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "fx/engine.hpp"
#include "fx/metrics.hpp"

namespace fx {

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

/// metrics.csv plus a JSONL twin, one row per record, flushed per row.
class MetricsLog {
public:
    static constexpr const char* kHeader = "cycle,epoch,dataset,task,mode,metric,value";

    MetricsLog(const std::filesystem::path& csv, const std::filesystem::path& jsonl);
    void write(const MetricsRecord& r);

private:
    std::ofstream csv_;
    std::ofstream jsonl_;
};

/// epochs.csv: one row per executed epoch with its mean losses.
class EpochLog {
public:
    static constexpr const char* kHeader =
        "cycle,epoch,dataset,task,mode,fraction,samples,steps,task_loss,consistency_backbone,consistency_branch,total";

    explicit EpochLog(const std::filesystem::path& csv);
    void write(const EpochSummary& s);

private:
    std::ofstream csv_;
};

}  // namespace fx
