#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "stochdd/error.hpp"
#include "stochdd/experiments.hpp"
#include "stochdd/quadrature.hpp"

namespace {

// Exit codes: 0 ok, 1 bad input, 2 numerical failure, 3 anything else.
int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const stochdd::InvalidArgument*>(&e)) return 1;
    if (dynamic_cast<const stochdd::NumericFailure*>(&e) || dynamic_cast<const stochdd::NonConvergence*>(&e)) return 2;
    return 3;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stochastic domain decomposition with adapted chaos bases"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
    run->add_option("-c,--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    run->add_option("-o,--out", out_dir, "Override outputs.dir");
    run->add_option("-s,--seed", seed, "Override the seed");
    run->add_flag("-q,--quiet", quiet, "Suppress progress lines");

    std::string problem = "diffusion-2d";
    auto* defaults = app.add_subcommand("defaults", "Print the default config of a problem");
    defaults->add_option("problem", problem, "richards-linear-1d, richards-nonlinear-1d or diffusion-2d");

    std::size_t dim = 0, level = 0;
    std::optional<std::string> grid_out;
    auto* grid = app.add_subcommand("grid", "Print the size of a Gauss-Hermite Smolyak grid");
    grid->add_option("-d,--dim", dim, "Stochastic dimension")->required()->check(CLI::PositiveNumber);
    grid->add_option("-l,--level", level, "Sparse-grid level")->required()->check(CLI::PositiveNumber);
    grid->add_option("-o,--out", grid_out, "Also write the points and weights as CSV");

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Summarize the results stored in an output directory");
    report->add_option("-d,--dir", report_dir, "Output directory of a previous run")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            auto cfg = stochdd::load_config(config_path);
            if (out_dir) cfg.output_dir = *out_dir;
            if (seed) cfg.seed = *seed;
            stochdd::run_experiment(cfg, quiet ? nullptr : &std::cerr);
            std::cout << stochdd::render_report(cfg.output_dir);
        } else if (*defaults) {
            std::cout << stochdd::config_to_json(stochdd::default_config(stochdd::parse_problem_name(problem))) << '\n';
        } else if (*grid) {
            const auto g = stochdd::smolyak_grid(dim, level);
            std::cout << g.size() << '\n';
            if (grid_out) {
                std::ofstream out(*grid_out);
                if (!out) throw stochdd::InvalidArgument(fmt::format("cannot write '{}'", *grid_out));
                stochdd::write_grid_csv(out, g);
            }
        } else if (*report) {
            std::cout << stochdd::render_report(report_dir);
        }
    } catch (const stochdd::ExperimentError& e) {
        std::cerr << "error in phase " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
    return EXIT_SUCCESS;
}
