#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "composer/train.hpp"
#include "composer/util.hpp"

namespace composer {

// Streams one JSON object per line. Line one is a run_start record carrying
// the schema version, the build id and the full resolved configuration, so
// any file is self-describing.
class MetricsWriter {
public:
    static constexpr int kSchema = 1;

    MetricsWriter(const std::string& path, const std::string& build_id, const std::string& config_text)
        : out_(path, std::ios::trunc), start_(now_seconds()) {
        if (!out_) throw std::runtime_error("metrics: cannot open '" + path + "' for writing");
        nlohmann::json j{{"schema", kSchema}, {"event", "run_start"}, {"build", build_id}, {"config", config_text}};
        out_ << j.dump() << "\n";
    }

    void event(const std::string& phase, std::int64_t epoch, std::int64_t step, const std::string& name,
               double value) {
        nlohmann::json j{{"schema", kSchema}, {"event", "metric"},     {"phase", phase}, {"epoch", epoch},
                         {"step", step},      {"name", name},          {"value", value},
                         {"wall", now_seconds() - start_}};
        out_ << j.dump() << "\n";
        out_.flush();
    }

    void note(const std::string& name, const nlohmann::json& payload) {
        nlohmann::json j{{"schema", kSchema}, {"event", name}, {"wall", now_seconds() - start_}};
        j["data"] = payload;
        out_ << j.dump() << "\n";
        out_.flush();
    }

    MetricSink sink() {
        return [this](const std::string& phase, std::int64_t epoch, std::int64_t step, const std::string& name,
                      double value) { event(phase, epoch, step, name, value); };
    }

private:
    std::ofstream out_;
    double start_;
};

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

// Plain CSV with a fixed column set; every row must match the header.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& columns)
        : out_(path, std::ios::trunc), ncols_(columns.size()) {
        if (!out_) throw std::runtime_error("csv: cannot open '" + path + "' for writing");
        write_raw(columns);
    }

    void row(const std::vector<std::string>& values) {
        if (values.size() != ncols_) {
            throw std::runtime_error("csv: row has " + std::to_string(values.size()) + " fields, header has " +
                                     std::to_string(ncols_));
        }
        write_raw(values);
    }

private:
    void write_raw(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << csv_escape(fields[i]);
        out_ << "\n";
        out_.flush();
    }

    std::ofstream out_;
    std::size_t ncols_;
};

// one-line form of a config for embedding into CSV fields
inline std::string config_one_line(std::string text) {
    for (char& c : text) {
        if (c == '\n') c = ';';
    }
    while (!text.empty() && text.back() == ';') text.pop_back();
    return text;
}

}  // namespace composer
