#include "fedtabgan/data.hpp"
#include "fedtabgan/errors.hpp"
#include "fedtabgan/eval.hpp"
#include "fedtabgan/federation.hpp"
#include "fedtabgan/fednet.hpp"
#include "fedtabgan/gan.hpp"
#include "fedtabgan/kv.hpp"
#include "fedtabgan/weights.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace fedtabgan;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct GanFlags {
    std::string config_file;
    std::optional<std::string> loss;
    std::optional<std::size_t> batch_size;
    std::optional<double> learning_rate;
    std::optional<std::size_t> d_steps;
    std::optional<std::size_t> noise_dim;
    std::optional<std::string> g_hidden;
    std::optional<std::string> d_hidden;
    std::optional<double> gp_lambda;

    void attach(CLI::App* app) {
        app->add_option("--config", config_file, "key=value file overlaid on the defaults");
        app->add_option("--loss", loss, "vanilla or wgan_gp");
        app->add_option("--batch-size", batch_size, "minibatch rows");
        app->add_option("--lr", learning_rate, "Adam learning rate");
        app->add_option("--d-steps", d_steps, "discriminator updates per generator update");
        app->add_option("--noise-dim", noise_dim, "generator input width");
        app->add_option("--g-hidden", g_hidden, "generator hidden widths, comma separated");
        app->add_option("--d-hidden", d_hidden, "discriminator hidden widths, comma separated");
        app->add_option("--gp-lambda", gp_lambda, "gradient penalty weight");
    }

    // Defaults, then the config file, then explicit flags.
    KeyValues overlay() const {
        KeyValues kv;
        if (!config_file.empty()) kv = load_key_values(config_file);
        if (loss) kv["loss"] = *loss;
        if (batch_size) kv["batch_size"] = std::to_string(*batch_size);
        if (learning_rate) kv["learning_rate"] = format_double(*learning_rate);
        if (d_steps) kv["d_steps_per_g_step"] = std::to_string(*d_steps);
        if (noise_dim) kv["noise_dim"] = std::to_string(*noise_dim);
        if (g_hidden) kv["g_hidden"] = *g_hidden;
        if (d_hidden) kv["d_hidden"] = *d_hidden;
        if (gp_lambda) kv["gp_lambda"] = format_double(*gp_lambda);
        return kv;
    }
};

// --seed wins, then FEDTABGAN_SEED, then the fallback.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
    if (flag) return *flag;
    if (const char* env = std::getenv("FEDTABGAN_SEED"); env && *env) return parse_uint(env, "FEDTABGAN_SEED");
    return fallback;
}

void note(const std::string& text) { std::cerr << text << '\n'; }

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-")
        std::cout << text;
    else
        eval::write_text_file(path, text);
}

fs::path log_path_for(const fs::path& base, std::size_t round, std::size_t node) {
    fs::path p = base;
    p.replace_filename(base.stem().string() + "_r" + std::to_string(round) + "_n" + std::to_string(node) +
                       base.extension().string());
    return p;
}

gan::TrainHooks progress_hooks(std::uint64_t every, const std::string& prefix) {
    gan::TrainHooks hooks;
    if (every == 0) return hooks;
    hooks.on_step = [every, prefix](const gan::TrainRecord& r) {
        if ((r.step + 1) % every != 0) return;
        std::ostringstream ss;
        ss << prefix << "step " << r.step + 1 << " d_loss " << format_double(r.d_loss) << " g_loss "
           << format_double(r.g_loss);
        if (r.gp) ss << " gp " << format_double(*r.gp);
        ss << " (" << static_cast<long long>(r.elapsed_ms) << " ms)";
        note(ss.str());
    };
    return hooks;
}

// ---- synth ----

struct SynthArgs {
    std::string out;
    std::size_t patients = 5000;
    std::size_t features = 200;
    std::size_t silos = 1;
    std::size_t latent = 8;
    double sparsity = 0.03;
    double silo_shift = 0.0;
    std::optional<std::uint64_t> seed;
    std::string labels_from;
};

// Codes in file order from a dictionary CSV.
std::vector<std::string> dictionary_codes(const fs::path& path) {
    std::istringstream in(eval::read_text_file(path));
    std::vector<std::string> codes;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        codes.push_back(data::split_csv_line(line).at(0));
    }
    return codes;
}

int cmd_synth(const SynthArgs& a) {
    data::SourceParams params;
    params.n_patients = a.patients;
    params.n_features = a.features;
    params.n_latent = a.latent;
    params.sparsity_target = a.sparsity;
    params.silo_shift = a.silo_shift;
    params.seed = resolve_seed(a.seed, params.seed);
    data::validate(params);
    if (a.silos == 0) throw ConfigError("--silos must be at least 1");

    std::vector<std::string> labels;
    if (!a.labels_from.empty()) {
        labels = dictionary_codes(a.labels_from);
        if (labels.size() < a.features)
            throw ConfigError("dictionary has " + std::to_string(labels.size()) + " codes, need " +
                              std::to_string(a.features));
        labels.resize(a.features);
    }
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < a.silos; ++i) {
        auto m = data::synth_source(params, i);
        if (!labels.empty()) m.set_labels(labels);
        const fs::path path = fs::path(a.out) / ("silo_" + std::to_string(i) + ".csv");
        data::save_matrix(m, path);
        const double frac = static_cast<double>(m.count_ones()) / static_cast<double>(m.rows() * m.cols());
        std::cout << path.string() << ": " << m.rows() << " patients x " << m.cols()
                  << " features, fraction of ones " << format_double(frac) << " (target "
                  << format_double(a.sparsity) << ")\n";
    }
    return 0;
}

// ---- train ----

struct TrainArgs {
    GanFlags gan;
    std::vector<std::string> data;
    std::size_t silos = 1;
    std::uint64_t epochs = 20000;
    std::size_t rounds = 1;
    std::string out_model;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> shuffle_seed;
    bool remainder_to_last = false;
    bool shuffle_node_order = false;
    std::string log;
    std::string write_plan;
    std::uint64_t progress_every = 500;
};

int cmd_train(const TrainArgs& a) {
    std::vector<data::PatientMatrix> inputs;
    for (const auto& path : a.data) inputs.push_back(data::load_matrix(path));
    for (std::size_t i = 1; i < inputs.size(); ++i)
        if (inputs[i].cols() != inputs[0].cols())
            throw ValidationError("'" + a.data[i] + "' has " + std::to_string(inputs[i].cols()) +
                                  " features but '" + a.data[0] + "' has " + std::to_string(inputs[0].cols()));
    if (inputs.size() > 1 && a.silos != 1 && a.silos != inputs.size())
        throw UsageError("--silos conflicts with the number of --data files");

    federation::FederationPlan plan;
    plan.gan.seed = resolve_seed(a.seed, 0);
    plan.gan = gan::config_from_key_values(a.gan.overlay(), plan.gan);
    plan.gan.feature_dim = inputs[0].cols();
    plan.total_epochs = a.epochs;
    plan.rounds = a.rounds;
    plan.shuffle_seed = a.shuffle_seed.value_or(plan.gan.seed);
    plan.remainder_to_last = a.remainder_to_last;
    plan.shuffle_node_order = a.shuffle_node_order;
    plan.silo_count = inputs.size() > 1 ? inputs.size() : a.silos;

    std::vector<data::PatientMatrix> silos;
    if (inputs.size() > 1 || plan.silo_count == 1) {
        silos = std::move(inputs);
    } else {
        auto parts = federation::partition(inputs[0], plan.silo_count, plan.shuffle_seed, plan.remainder_to_last);
        if (parts.dropped > 0) note("partition dropped " + std::to_string(parts.dropped) + " leftover rows");
        plan.silo_row_ranges = parts.ranges;
        silos = std::move(parts.silos);
    }
    federation::validate(plan);
    note("effective configuration:\n" + federation::to_text(plan));
    if (!a.write_plan.empty()) federation::save_plan(plan, a.write_plan);

    const bool single = a.data.size() == 1 && plan.silo_count == 1 && plan.rounds == 1;
    gan::GanModel model;
    std::vector<gan::TrainLog> logs;
    if (single) {
        model = gan::build_gan(plan.gan);
        logs.push_back(gan::train(model, silos[0], plan.total_epochs, progress_hooks(a.progress_every, "")));
        federation::round_weights_to_f32(model);
    } else {
        federation::FederationHooks hooks;
        std::size_t current_node = 0;
        auto progress = progress_hooks(a.progress_every, "");
        hooks.train.on_step = [&](const gan::TrainRecord& r) {
            if (progress.on_step && a.progress_every && (r.step + 1) % a.progress_every == 0)
                std::cerr << "node " << current_node << ": ";
            if (progress.on_step) progress.on_step(r);
        };
        hooks.on_node_start = [&](std::size_t round, std::size_t node, const gan::GanModel&) {
            current_node = node;
            note("round " + std::to_string(round) + ": node " + std::to_string(node) + " training " +
                 std::to_string(plan.schedule()[round][node]) + " epochs on " + std::to_string(silos[node].rows()) +
                 " patients");
        };
        auto result = federation::run_federation(plan, silos, hooks);
        model = std::move(result.global);
        logs = std::move(result.logs);
    }
    for (const auto& log : logs)
        for (const auto& w : log.warnings) note("warning: " + w);

    if (!a.log.empty()) {
        if (single) {
            gan::write_log_csv(logs[0], a.log);
        } else {
            for (const auto& log : logs) gan::write_log_csv(log, log_path_for(a.log, log.round, log.node));
        }
    }
    if (!a.out_model.empty()) {
        std::vector<std::string> labels = silos[0].labels();
        federation::save_model(a.out_model, federation::make_model_file(model, std::move(labels)));
        note("model written to " + a.out_model + " (config digest " + gan::to_hex(gan::digest(model.config)) + ")");
    }
    return 0;
}

// ---- serve / worker ----

struct ServeArgs {
    std::string bind = "0.0.0.0:7070";
    std::string plan;
    std::string out_model;
    std::optional<std::uint64_t> timeout_secs;
};

int cmd_serve(const ServeArgs& a) {
    auto plan = federation::load_plan(a.plan);
    if (a.timeout_secs) plan.timeout_secs = *a.timeout_secs;
    federation::validate(plan);
    auto listener = fednet::Listener::bind(fednet::parse_endpoint(a.bind));
    note("listening on port " + std::to_string(listener.port()) + " for " + std::to_string(plan.silo_count) +
         " workers");
    fednet::CoordinatorOptions options;
    options.progress = [](std::string_view text) { note(std::string(text)); };
    const auto weights = fednet::coordinator_run(plan, listener, options);
    if (!a.out_model.empty()) {
        auto model = gan::build_gan(plan.gan);
        federation::load_weights(model, weights);
        federation::save_model(a.out_model, federation::make_model_file(model));
        note("model written to " + a.out_model);
    }
    return 0;
}

struct WorkerArgs {
    std::string connect;
    std::string data;
    std::uint32_t node_id = 0;
    std::string plan;
    double timeout_secs = 600.0;
    std::string log;
    std::uint64_t progress_every = 500;
};

int cmd_worker(const WorkerArgs& a) {
    fednet::WorkerOptions options;
    options.connect_timeout_secs = a.timeout_secs;
    if (!a.plan.empty()) options.expected_config = federation::load_plan(a.plan).gan;
    options.train_hooks = progress_hooks(a.progress_every, "node " + std::to_string(a.node_id) + ": ");
    if (!a.log.empty())
        options.on_log = [&](const gan::TrainLog& log) {
            gan::write_log_csv(log, log_path_for(a.log, log.round, log.node));
        };
    return fednet::worker_run(fs::path(a.data), a.connect, a.node_id, options);
}

// ---- generate / eval ----

struct GenerateArgs {
    std::string model;
    std::size_t n = 0;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string expect_config;
    bool force = false;
};

int cmd_generate(const GenerateArgs& a) {
    auto file = federation::load_model(a.model, !a.force);
    if (gan::digest(file.config) != file.digest)
        note("warning: model config digest mismatch ignored (--force)");
    if (!a.expect_config.empty()) {
        const auto expected = gan::config_from_key_values(load_key_values(a.expect_config));
        if (gan::digest(expected) != file.digest) {
            const std::string msg = "model digest " + gan::to_hex(file.digest) + " does not match '" +
                                    a.expect_config + "' (" + gan::to_hex(gan::digest(expected)) + ")";
            if (!a.force) throw IntegrityError(msg + "; rerun with --force to override");
            note("warning: " + msg);
        }
    }
    const auto model = federation::model_from_file(file);
    auto synth = gan::generate(model, a.n, resolve_seed(a.seed, 0));
    if (file.labels.size() == synth.cols()) synth.set_labels(file.labels);
    write_output(a.out, data::format_matrix(synth));
    return 0;
}

struct EvalArgs {
    std::string real;
    std::string synth;
    std::string out_report;
    std::string scatter;
    std::string histogram;
    std::size_t hist_bins = 20;
    double threshold = eval::kDefaultDistanceThreshold;
};

int cmd_eval(const EvalArgs& a) {
    const auto real = data::load_matrix(a.real);
    const auto synth = data::load_matrix(a.synth);
    if (real.cols() != synth.cols())
        throw ValidationError("real data has " + std::to_string(real.cols()) + " features, synthetic has " +
                              std::to_string(synth.cols()));
    const auto report = eval::evaluate(real, synth, a.hist_bins, a.threshold);
    write_output(a.out_report, eval::format_report(report));
    if (!a.scatter.empty())
        eval::scatter_export(eval::feature_probabilities(real), eval::feature_probabilities(synth), a.scatter,
                             real.labels());
    if (!a.histogram.empty()) eval::write_text_file(a.histogram, eval::format_histogram(report.histogram));
    return 0;
}

// ---- survey ----

struct SurveyArgs {
    std::string real;
    std::vector<std::string> synth;
    std::size_t n = 20;
    std::string dict;
    std::optional<std::uint64_t> seed;
    std::string out_pack;
    std::string out_key;
};

int cmd_survey(const SurveyArgs& a) {
    if (a.synth.size() != 2)
        throw UsageError("--synth needs exactly two files: single-source then federated");
    const auto real = data::load_matrix(a.real);
    const auto single = data::load_matrix(a.synth[0]);
    const auto fed = data::load_matrix(a.synth[1]);
    if (single.cols() != real.cols() || fed.cols() != real.cols())
        throw ValidationError("survey sources differ in feature count");
    const auto dict = a.dict.empty() ? data::CodeDictionary{} : data::load_dictionary(a.dict);
    auto label = [&](data::PatientMatrix m) {
        if (!m.has_labels() && real.has_labels()) m.set_labels(real.labels());
        return m;
    };
    const auto pack = eval::make_survey_pack(real, label(single), label(fed), a.n, dict, resolve_seed(a.seed, 0));
    write_output(a.out_pack, eval::format_pack(pack));
    eval::write_text_file(a.out_key, eval::format_key(pack.key));
    return 0;
}

struct TabulateArgs {
    std::vector<std::string> responses;
    std::string key;
    std::string out;
};

int cmd_survey_tabulate(const TabulateArgs& a) {
    const auto key = eval::parse_key(eval::read_text_file(a.key));
    std::vector<eval::SurveyResponse> responses;
    std::vector<std::string> names;
    for (const auto& path : a.responses) {
        responses.push_back(eval::parse_response(eval::read_text_file(path)));
        names.push_back(fs::path(path).stem().string());
    }
    write_output(a.out, eval::format_tables(eval::tabulate_survey(responses, key), names));
    return 0;
}

int exit_code_for(const Error& e) {
    if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
        dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
        dynamic_cast<const IntegrityError*>(&e) || dynamic_cast<const ShapeError*>(&e))
        return kExitUsage;
    return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated GAN for synthetic binary patient records"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "write a synthetic multi-silo patient source");
    s->add_option("--out", synth.out, "output directory")->required();
    s->add_option("--patients", synth.patients, "patients per silo");
    s->add_option("--features", synth.features, "diagnosis codes");
    s->add_option("--silos", synth.silos, "number of silo files");
    s->add_option("--latent", synth.latent, "latent topics");
    s->add_option("--sparsity", synth.sparsity, "target fraction of ones");
    s->add_option("--silo-shift", synth.silo_shift, "distribution drift between silos");
    s->add_option("--seed", synth.seed, "source seed");
    s->add_option("--labels-from", synth.labels_from, "dictionary CSV whose codes label the features");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a single-source or federated model");
    t->add_option("--data", train.data, "patient CSV; repeat for one file per silo")->required();
    t->add_option("--silos", train.silos, "split a single --data file into this many silos");
    t->add_option("--epochs", train.epochs, "total epochs across all nodes and rounds");
    t->add_option("--rounds", train.rounds, "federation rounds");
    t->add_option("--out-model", train.out_model, "model file to write");
    t->add_option("--seed", train.seed, "initialisation and training seed");
    t->add_option("--shuffle-seed", train.shuffle_seed, "partition seed (defaults to --seed)");
    t->add_flag("--remainder-to-last", train.remainder_to_last, "keep leftover rows in the last silo");
    t->add_flag("--shuffle-node-order", train.shuffle_node_order, "permute node order every round");
    t->add_option("--log", train.log, "training log CSV");
    t->add_option("--write-plan", train.write_plan, "also save the federation plan for serve/worker");
    t->add_option("--progress-every", train.progress_every, "report every N epochs (0 disables)");
    train.gan.attach(t);

    ServeArgs serve;
    auto* sv = app.add_subcommand("serve", "coordinate a networked federated session");
    sv->add_option("--bind", serve.bind, "listen address host:port");
    sv->add_option("--plan", serve.plan, "federation plan file")->required();
    sv->add_option("--out-model", serve.out_model, "model file to write on success");
    sv->add_option("--timeout-secs", serve.timeout_secs, "per-turn timeout");

    WorkerArgs worker;
    auto* w = app.add_subcommand("worker", "train one silo for a coordinator");
    w->add_option("--connect", worker.connect, "coordinator address host:port")->required();
    w->add_option("--data", worker.data, "local silo CSV")->required();
    w->add_option("--node-id", worker.node_id, "this node's index")->required();
    w->add_option("--plan", worker.plan, "plan file to check the coordinator's config against");
    w->add_option("--timeout-secs", worker.timeout_secs, "give up connecting after this long");
    w->add_option("--log", worker.log, "training log CSV (suffixed per round)");
    w->add_option("--progress-every", worker.progress_every, "report every N epochs (0 disables)");

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "sample synthetic patients from a model");
    g->add_option("--model", gen.model, "model file")->required();
    g->add_option("--n", gen.n, "patients to generate")->required();
    g->add_option("--seed", gen.seed, "sampling seed");
    g->add_option("--out", gen.out, "output CSV (stdout when omitted)");
    g->add_option("--expect-config", gen.expect_config, "config file the model must have been trained with");
    g->add_flag("--force", gen.force, "proceed despite digest mismatches");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "compare synthetic against real patients");
    e->add_option("--real", ev.real, "real patient CSV")->required();
    e->add_option("--synth", ev.synth, "synthetic patient CSV")->required();
    e->add_option("--out-report", ev.out_report, "report file (stdout when omitted)");
    e->add_option("--scatter", ev.scatter, "feature probability scatter CSV");
    e->add_option("--histogram", ev.histogram, "minimum cosine distance histogram CSV");
    e->add_option("--hist-bins", ev.hist_bins, "histogram bins")->check(CLI::PositiveNumber);
    e->add_option("--threshold", ev.threshold, "cosine distance privacy threshold");

    SurveyArgs survey;
    auto* sr = app.add_subcommand("survey", "build a blinded plausibility survey pack");
    sr->add_option("--real", survey.real, "real patient CSV")->required();
    sr->add_option("--synth", survey.synth, "single-source then federated synthetic CSVs")->required();
    sr->add_option("--n", survey.n, "patients per group");
    sr->add_option("--dict", survey.dict, "code,description dictionary CSV");
    sr->add_option("--seed", survey.seed, "sampling seed");
    sr->add_option("--out-pack", survey.out_pack, "rater-facing pack (stdout when omitted)");
    sr->add_option("--out-key", survey.out_key, "answer key CSV")->required();

    TabulateArgs tab;
    auto* st = app.add_subcommand("survey-tabulate", "count rater responses by origin");
    st->add_option("--responses", tab.responses, "response CSVs, one per rater")->required();
    st->add_option("--key", tab.key, "answer key CSV")->required();
    st->add_option("--out", tab.out, "tables CSV (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (*s) return cmd_synth(synth);
        if (*t) return cmd_train(train);
        if (*sv) return cmd_serve(serve);
        if (*w) return cmd_worker(worker);
        if (*g) return cmd_generate(gen);
        if (*e) return cmd_eval(ev);
        if (*sr) return cmd_survey(survey);
        if (*st) return cmd_survey_tabulate(tab);
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return exit_code_for(err);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
