#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poisonlab/config.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/encoder.hpp"
#include "poisonlab/experiments.hpp"
#include "poisonlab/fixture.hpp"
#include "poisonlab/optim.hpp"
#include "poisonlab/triggers.hpp"
#include "poisonlab/victim.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;

namespace {

void print_report_summary(const experiments::ExperimentReport& report) {
    const metrics::MetricsReport agg = report.aggregate();
    std::printf("experiment %s\n", report.config_hash.c_str());
    std::printf("  trigger: %s  cfe: %s  seeds ok: %zu/%zu\n",
                get_str(report.config, "trigger.method", "?").c_str(),
                get_str(report.config, "cfe.enabled", "false").c_str(), agg.seeds.size(),
                report.seeds.size());
    std::printf("  BA  = %.4f +- %.4f\n", agg.ba_mean(), agg.ba_std());
    std::printf("  ASR = %.4f +- %.4f\n", agg.asr_mean(), agg.asr_std());
    std::printf("  PSNR = %.2f dB  SSIM = %.4f\n", agg.psnr_mean_db(), agg.ssim_mean());
    for (const auto& s : report.seeds)
        if (!s.ok) std::printf("  seed %llu FAILED: %s\n",
                               static_cast<unsigned long long>(s.seed), s.error.c_str());
}

experiments::ExperimentConfig config_from_file(const std::string& path) {
    return experiments::ExperimentConfig::from_flat(load_flat_config(path));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"data-constrained backdoor poisoning toolkit"};
    app.require_subcommand(1);

    // ------------------------------------------------------------------ run
    auto* run_cmd = app.add_subcommand("run", "run one experiment from a config file");
    std::string run_config;
    run_cmd->add_option("--config", run_config, "flat key=value config file")->required();

    // ----------------------------------------------------------------- grid
    auto* grid_cmd = app.add_subcommand("grid", "sweep one axis of a base config");
    std::string grid_config, grid_axis, grid_values;
    grid_cmd->add_option("--config", grid_config, "base config file")->required();
    grid_cmd->add_option("--axis", grid_axis,
                         "poison_rate | class_count | domain_rate | epsilon")->required();
    grid_cmd->add_option("--values", grid_values, "comma-separated axis values")->required();

    // ----------------------------------------------------------------- plot
    auto* plot_cmd = app.add_subcommand("plot", "render ASR charts from saved reports");
    std::string plot_in, plot_out;
    plot_cmd->add_option("--in", plot_in, "directory containing report.json files")->required();
    plot_cmd->add_option("--out", plot_out, "output directory (default: --in)");

    // ----------------------------------------------------------- gen-trigger
    auto* gen_cmd = app.add_subcommand("gen-trigger", "synthesize a trigger artifact");
    std::string gen_method, gen_out, gen_epsilon = "8/255", gen_alpha = "2/255";
    std::string gen_config;
    int gen_steps = 50;
    gen_cmd->add_option("--method", gen_method, "badnets | blended | uap | clip-uap | clip-cfa")
        ->required();
    gen_cmd->add_option("--epsilon", gen_epsilon, "budget, e.g. 8/255");
    gen_cmd->add_option("--alpha", gen_alpha, "step size, e.g. 2/255");
    gen_cmd->add_option("--steps", gen_steps, "PGD outer steps");
    gen_cmd->add_option("--out", gen_out, "output path stem (writes <out>.{noise|png}+.json)")
        ->required();
    gen_cmd->add_option("--config", gen_config,
                        "experiment config supplying dataset/scenario/encoder (optional for "
                        "badnets/blended)");

    // ----------------------------------------------------------- make-fixture
    auto* fix_cmd = app.add_subcommand("make-fixture", "write the synthetic desk dataset");
    std::string fix_out;
    uint64_t fix_seed = 604613;
    fix_cmd->add_option("--out", fix_out, "output directory")->required();
    fix_cmd->add_option("--seed", fix_seed, "fixture seed");

    // ------------------------------------------------------------ recompute
    auto* rec_cmd = app.add_subcommand("recompute",
                                       "rebuild a report from persisted artifacts (no retraining)");
    std::string rec_dir, rec_hash;
    rec_cmd->add_option("--out-dir", rec_dir, "experiment output root")->required();
    rec_cmd->add_option("--hash", rec_hash, "config hash of the experiment")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) {
            const auto cfg = config_from_file(run_config);
            const auto report = experiments::run_experiment(cfg);
            print_report_summary(report);
            std::printf("report: %s\n",
                        (fs::path(cfg.output_dir) / report.config_hash / "report.json").c_str());
        } else if (*grid_cmd) {
            const auto cfg = config_from_file(grid_config);
            std::vector<double> values;
            for (const std::string& tok : split_list(grid_values))
                values.push_back(parse_number_or_fraction(tok));
            const auto reports = experiments::run_grid(
                cfg, experiments::grid_axis_from_name(grid_axis), values);
            for (const auto& r : reports) print_report_summary(r);
            const auto files = experiments::emit_plots(reports, cfg.output_dir);
            for (const auto& f : files) std::printf("wrote %s\n", f.c_str());
        } else if (*plot_cmd) {
            const auto reports = experiments::load_reports(plot_in);
            const auto files =
                experiments::emit_plots(reports, plot_out.empty() ? plot_in : plot_out);
            for (const auto& f : files) std::printf("wrote %s\n", f.c_str());
        } else if (*gen_cmd) {
            experiments::ExperimentConfig cfg;
            if (!gen_config.empty()) cfg = config_from_file(gen_config);
            cfg.trigger.method = gen_method;
            cfg.budget.epsilon = static_cast<float>(parse_number_or_fraction(gen_epsilon));
            cfg.budget.alpha = static_cast<float>(parse_number_or_fraction(gen_alpha));
            cfg.budget.steps = gen_steps;

            const auto bundle_cfg = cfg;  // dataset defaults to the fixture
            const auto fixture = data::make_desk_fixture(bundle_cfg.dataset.fixture);
            const Tensor& shape = fixture.train.examples[0].image;

            triggers::Trigger trigger;
            if (gen_method == "badnets") {
                trigger = triggers::make_badnets_trigger(cfg.trigger.patch_size,
                                                         cfg.trigger.patch_position,
                                                         std::nullopt, shape.c);
            } else if (gen_method == "blended") {
                trigger = cfg.trigger.blend_pattern_path.empty()
                              ? triggers::make_blended_trigger_from_pattern(
                                    triggers::make_default_blend_pattern(shape.c, shape.h,
                                                                         shape.w),
                                    cfg.trigger.blend_lambda)
                              : triggers::make_blended_trigger(cfg.trigger.blend_pattern_path,
                                                               cfg.trigger.blend_lambda, shape.c,
                                                               shape.h, shape.w);
            } else {
                data::ScenarioSpec scenario = cfg.scenario;
                scenario.seed = Rng::derive(cfg.seeds.empty() ? 1 : cfg.seeds[0], 0x5eed);
                const auto accessible =
                    data::sample_accessible_set(fixture.train, &fixture.external_pool, scenario);
                if (gen_method == "uap") {
                    if (cfg.trigger.proxy_checkpoint.empty())
                        throw std::runtime_error(
                            "gen-trigger --method uap needs trigger.proxy in --config "
                            "(full-access baseline)");
                    const auto proxy = victim::load_checkpoint(cfg.trigger.proxy_checkpoint);
                    trigger = triggers::make_additive_trigger(
                        optim::optimize_proxy_uap(proxy, fixture.train,
                                                  cfg.scenario.target_label, cfg.budget,
                                                  cfg.trigger.batch_size),
                        "uap");
                } else {
                    encoder::ToyEncoderOptions toy;
                    toy.seed = cfg.encoder_spec.toy_seed;
                    toy.params.dim = cfg.encoder_spec.toy_dim;
                    toy.params.input_resolution = cfg.encoder_spec.toy_resolution;
                    const auto enc =
                        cfg.encoder_spec.adapter == "toy"
                            ? encoder::load_encoder("", "toy", toy)
                            : encoder::load_encoder(cfg.encoder_spec.adapter, "linear");
                    if (gen_method == "clip-uap") {
                        const auto prompts =
                            encoder::build_prompts(fixture.train.class_names, *enc);
                        trigger = triggers::make_additive_trigger(
                            optim::optimize_clip_uap(*enc, prompts, accessible,
                                                     cfg.scenario.target_label, cfg.budget,
                                                     cfg.trigger.batch_size),
                            "clip-uap");
                    } else {
                        trigger = triggers::make_additive_trigger(
                            optim::optimize_clip_cfa(*enc, accessible, cfg.budget, 0,
                                                     cfg.trigger.batch_size),
                            "clip-cfa");
                    }
                }
            }
            triggers::save_trigger(trigger, gen_out);
            std::printf("trigger %s written to %s.*\n", trigger.id.c_str(), gen_out.c_str());
        } else if (*fix_cmd) {
            data::FixtureParams params;
            params.seed = fix_seed;
            const auto fixture = data::make_desk_fixture(params);
            fs::create_directories(fix_out);
            data::save_packed(fixture.train, (fs::path(fix_out) / "train.packed").string());
            data::save_packed(fixture.test, (fs::path(fix_out) / "test.packed").string());
            data::save_packed(fixture.external_pool,
                              (fs::path(fix_out) / "external.packed").string());
            std::ofstream names(fs::path(fix_out) / "classes.txt");
            for (const auto& n : fixture.train.class_names) names << n << "\n";
            std::printf("fixture written to %s (train/test/external.packed, classes.txt)\n",
                        fix_out.c_str());
        } else if (*rec_cmd) {
            const auto report = experiments::recompute_report(rec_dir, rec_hash);
            print_report_summary(report);
            std::fputs(report.to_json().c_str(), stdout);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
