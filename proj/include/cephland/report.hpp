#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cephland/pipeline.hpp"

namespace cephland {

/// MRE against the swept parameter. Numeric x values get a linear axis,
/// anything else is plotted as ordered categories. Missing points leave a
/// gap in the line and are reported through `log`.
void plot_sweep(const SweepResult& sweep, const std::filesystem::path& png, const LogFn& log = log_stderr);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv_table(const std::filesystem::path& file);

/// Renders a CSV table as a grid image.
void render_table(const CsvTable& table, const std::filesystem::path& png);

/// For every sweep_*.csv and fold_table.csv in `input_dir`, writes the plot or
/// table image plus a copy of the CSV to `out_dir`. Returns the files written.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& input_dir,
                                                const std::filesystem::path& out_dir,
                                                const LogFn& log = log_stderr);

}  // namespace cephland
