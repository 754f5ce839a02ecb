#include "unlearnkit/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "binary_io.hpp"
#include "unlearnkit/attack.hpp"
#include "unlearnkit/dataset.hpp"
#include "unlearnkit/errors.hpp"
#include "unlearnkit/eval.hpp"
#include "unlearnkit/importance.hpp"
#include "unlearnkit/model.hpp"
#include "unlearnkit/unlearn.hpp"

namespace unlearnkit {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "usage"; }
};

// ---- Config files ----------------------------------------------------------------------------

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string config_text(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_array()) {
        std::string out;
        for (const auto& e : v) out += (out.empty() ? "" : ",") + config_text(e);
        return out;
    }
    return v.dump();
}

// Flat {option name: value}. JSON objects are read as is; otherwise one key=value per line, '#' comments.
json read_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    const auto t = trim(text);
    if (!t.empty() && t.front() == '{') {
        try {
            return json::parse(t);
        } catch (const json::exception& e) {
            throw IoError("malformed JSON config " + path.string() + ": " + e.what());
        }
    }
    json out = json::object();
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("config line without '=' in " + path.string() + ": " + line);
        auto value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
            value = value.substr(1, value.size() - 2);
        out[trim(line.substr(0, eq))] = value;
    }
    return out;
}

std::string option_key(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

// Config entries become --key=value arguments unless the flag is already given.
std::vector<std::string> expand_config(const CLI::App& sub, std::vector<std::string> args) {
    std::optional<std::string> path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (!path) return args;
    const json cfg = read_config(*path);
    std::vector<std::string> injected;
    for (const auto& [raw_key, value] : cfg.items()) {
        const auto key = option_key(raw_key);
        if (key == "subcommand" || key == "config" || value.is_null()) continue;
        const std::string flag = "--" + key;
        if (!sub.get_option_no_throw(flag)) throw UsageError("unknown config key '" + raw_key + "' for " + sub.get_name());
        if (!given_on_command_line(args, flag)) injected.push_back(flag + "=" + config_text(value));
    }
    args.insert(args.begin() + 1, injected.begin(), injected.end());
    return args;
}

// Every option of the subcommand with its resolved value; feeding it back through --config repeats the run.
json resolved_options(const CLI::App& sub) {
    json j = json::object();
    j["subcommand"] = sub.get_name();
    for (const auto* o : sub.get_options()) {
        const auto name = o->get_single_name();
        if (name == "help" || name == "config") continue;
        if (o->count() > 0) {
            std::string v;
            for (const auto& r : o->results()) v += (v.empty() ? "" : ",") + r;
            j[name] = v;
        } else if (!o->get_default_str().empty()) {
            j[name] = o->get_default_str();
        } else {
            j[name] = nullptr;
        }
    }
    return j;
}

// ---- Helpers ---------------------------------------------------------------------------------

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
    std::vector<T> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        std::istringstream conv(item);
        T v{};
        conv >> v;
        if (!conv || !conv.eof()) throw UsageError(std::string("invalid value '") + item + "' in " + what);
        out.push_back(v);
    }
    return out;
}

std::vector<std::string> split_names(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ','))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

void write_trace(const fs::path& path, const std::vector<json>& lines) {
    std::string text;
    for (const auto& l : lines) text += l.dump() + "\n";
    detail::write_text_file(path, text);
}

double percent(double v) { return 100.0 * v; }

// ---- Shared option groups -------------------------------------------------------------------

struct UnlearnArgs {
    UnlearnConfig cfg;
    std::string method = "adv";
    std::string target_policy = "per_image";
    std::string importance_on = "logits";
    bool random_start = true;
    bool clamp_pixels = true;

    void add(CLI::App* sub) {
        sub->add_option("--method", method, "neggrad, correct, adv, adv_imp, oracle or rawp")
            ->check(CLI::IsMember({"neggrad", "correct", "adv", "adv_imp", "oracle", "rawp"}));
        sub->add_option("--lr", cfg.lr, "SGD learning rate");
        sub->add_option("--momentum", cfg.momentum);
        sub->add_option("--weight-decay", cfg.weight_decay);
        sub->add_option("--lambda", cfg.lambda, "regularizer weight");
        sub->add_option("--lambda-adv", cfg.lambda_adv, "adversarial weight (defaults to --lambda)");
        sub->add_option("--lambda-imp", cfg.lambda_imp, "importance weight (defaults to --lambda)");
        sub->add_option("--max-epochs", cfg.max_epochs);
        sub->add_option("--forget-batch", cfg.forget_batch);
        sub->add_option("--adv-batch", cfg.adv_batch);
        sub->add_option("--remain-batch", cfg.remain_batch, "oracle only");
        sub->add_option("--n-adv", cfg.n_adv, "adversarial examples per forget instance");
        sub->add_option("--eps", cfg.attack.epsilon, "L2 attack budget");
        sub->add_option("--attack-steps", cfg.attack.iterations);
        sub->add_option("--attack-lr", cfg.attack.step_size);
        sub->add_option("--random-start", random_start);
        sub->add_option("--clamp-pixels", clamp_pixels);
        sub->add_option("--target-policy", target_policy)->check(CLI::IsMember({"per_image", "per_example"}));
        sub->add_option("--importance-on", importance_on)->check(CLI::IsMember({"logits", "probabilities"}));
        sub->add_option("--gamma", cfg.gamma, "RAWP perturbation scale");
        sub->add_option("--awp-eps", cfg.awp_eps);
    }

    UnlearnConfig resolve(std::uint64_t seed) const {
        UnlearnConfig c = cfg;
        c.method = method_from_string(method);
        c.target_policy = target_policy_from_string(target_policy);
        c.importance_on = importance_on_from_string(importance_on);
        c.attack.random_start = random_start;
        c.attack.clamp_pixels = clamp_pixels;
        c.attack.seed = seed;
        c.seed = seed;
        c.validate();
        return c;
    }
};

void add_seed(CLI::App* sub, std::uint64_t& seed) {
    sub->add_option("--seed", seed, "seed (env UNLEARNKIT_SEED when not given)")->envname("UNLEARNKIT_SEED");
}

CLI::Option* add_existing_path(CLI::App* sub, const std::string& flag, std::string& target, const std::string& help) {
    return sub->add_option(flag, target, help)->check(CLI::ExistingPath);
}

std::optional<Dataset> load_optional_dataset(const std::string& dir) {
    if (dir.empty()) return std::nullopt;
    return load_dataset(dir);
}

// ---- Unlearning runs -------------------------------------------------------------------------

struct RunContext {
    const ClassifierState* s0 = nullptr;
    const Dataset* train = nullptr;
    const Dataset* test = nullptr;
    const AdversarialSet* adversarial = nullptr;
    const ImportanceMap* importance = nullptr;
    bool monitor = false;
};

json accuracy_block(const ClassifierState& before, const ClassifierState& after, const Dataset& forget,
                    const Dataset& remain, const Dataset* test, const ForgetManifest& m) {
    const auto targets = forget_targets(forget, m);
    json j{{"forget", {{"before", percent(accuracy(before, forget, targets))},
                       {"after", percent(accuracy(after, forget, targets))}}}};
    if (!remain.empty())
        j["remain"] = {{"before", percent(accuracy(before, remain))}, {"after", percent(accuracy(after, remain))}};
    if (test && !test->empty())
        j["test"] = {{"before", percent(accuracy(before, *test))}, {"after", percent(accuracy(after, *test))}};
    return j;
}

ClassifierState tag_state(ClassifierState s, const UnlearnConfig& cfg, const UnlearnResult& r, std::size_t k) {
    s.metadata["unlearning"] = {{"method", to_string(cfg.method)},
                                {"k", k},
                                {"epochs_run", r.epochs_run},
                                {"stop_reason", to_string(r.stop_reason)}};
    return s;
}

// Runs one unlearning job and writes run_spec.json, manifest.json, trace.jsonl, model.ckpt and result.json.
json run_single(const RunContext& ctx, const ForgetManifest& manifest, const UnlearnConfig& cfg, const json& spec,
                const fs::path& out) {
    fs::create_directories(out);
    detail::write_json_file(out / "run_spec.json", spec);
    save_manifest(out / "manifest.json", manifest);
    auto [forget, remain] = split_remaining(*ctx.train, manifest);
    Monitor monitor{ctx.monitor ? &remain : nullptr, ctx.test};
    UnlearnResult r;
    switch (cfg.method) {
        case Method::oracle: r = run_oracle(*ctx.s0, forget, remain, manifest, cfg, monitor); break;
        case Method::rawp:
            if (manifest.mode != ForgetMode::misclassify) throw ArgumentError("rawp needs a misclassify manifest");
            r = run_rawp(*ctx.s0, forget, cfg, monitor);
            break;
        default: r = run_unlearning(*ctx.s0, forget, manifest, cfg, {ctx.adversarial, ctx.importance}, monitor);
    }
    std::vector<json> trace;
    for (const auto& rec : r.trace) trace.push_back(epoch_record_to_json(rec));
    write_trace(out / "trace.jsonl", trace);
    save_checkpoint(out / "model.ckpt", tag_state(r.state, cfg, r, manifest.size()));
    json result = unlearn_result_summary(r);
    result["method"] = to_string(cfg.method);
    result["k"] = manifest.size();
    result["accuracies"] = accuracy_block(*ctx.s0, r.state, forget, remain, ctx.test, manifest);
    detail::write_json_file(out / "result.json", result);
    return result;
}

ForgetManifest resolve_manifest(const std::string& path, const Dataset& train, std::size_t k, const std::string& mode,
                                std::uint64_t seed) {
    if (!path.empty()) {
        auto m = load_manifest(path);
        m.validate_against(train);
        return m;
    }
    if (k == 0) throw UsageError("either --manifest or --k is required");
    return select_forget_set(train, k, forget_mode_from_string(mode), seed);
}

// ---- Subcommands -----------------------------------------------------------------------------

struct SynthCmd {
    std::string out, kind = "images";
    SyntheticImageConfig image;
    std::size_t dim = 2;
    double spread = 0.1;
    std::uint64_t seed = 0;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("synth", "write a synthetic dataset directory");
        sub->add_option("--out", out, "output directory")->required();
        sub->add_option("--kind", kind, "images or blobs")->check(CLI::IsMember({"images", "blobs"}));
        sub->add_option("--num-classes", image.num_classes);
        sub->add_option("--per-class", image.per_class);
        sub->add_option("--height", image.height);
        sub->add_option("--width", image.width);
        sub->add_option("--channels", image.channels);
        sub->add_option("--contrast", image.contrast);
        sub->add_option("--variation", image.variation);
        sub->add_option("--noise", image.noise);
        sub->add_option("--features", image.features);
        sub->add_option("--feature-width-min", image.feature_width_min);
        sub->add_option("--feature-width-max", image.feature_width_max);
        sub->add_option("--prototypes", image.prototypes);
        sub->add_option("--prototype-contrast", image.prototype_contrast);
        sub->add_option("--template-seed", image.template_seed);
        sub->add_option("--first-id", image.first_id);
        sub->add_option("--dim", dim, "blobs only");
        sub->add_option("--spread", spread, "blobs only");
        add_seed(sub, seed);
    }

    int run(const CLI::App&) const {
        Dataset ds = kind == "images" ? make_synthetic_images(image, seed)
                                      : make_synthetic(image.num_classes, image.per_class, dim, spread, seed);
        if (kind == "blobs" && image.first_id != 0)
            for (auto& id : ds.ids) id += image.first_id;
        save_dataset(out, ds);
        emit({{"dataset", out}, {"count", ds.size()}, {"num_classes", ds.num_classes}, {"shape", ds.shape}});
        return exit_code::ok;
    }
};

struct PretrainCmd {
    std::string data, out, arch = "cnn_s", init;
    OptimConfig optim;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("pretrain", "train a reference classifier");
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        sub->add_option("--out", out, "checkpoint path")->required();
        sub->add_option("--arch", arch)->check(CLI::IsMember({"linear", "mlp2", "cnn_s"}));
        add_existing_path(sub, "--init", init, "start from this checkpoint instead of a fresh init");
        sub->add_option("--epochs", optim.epochs);
        sub->add_option("--lr", optim.lr);
        sub->add_option("--momentum", optim.momentum);
        sub->add_option("--weight-decay", optim.weight_decay);
        sub->add_option("--batch-size", optim.batch_size);
        add_seed(sub, optim.seed);
    }

    int run(const CLI::App&) const {
        const Dataset ds = load_dataset(data);
        ClassifierState s0 = init.empty()
                                 ? init_state(make_architecture(arch, ds.shape, ds.num_classes), optim.seed)
                                 : load_checkpoint(init);
        auto r = pretrain(s0, ds, optim);
        r.state.metadata["dataset"] = fs::path(data).filename().string();
        save_checkpoint(out, r.state);
        emit({{"checkpoint", out}, {"train_accuracy", percent(r.train_accuracy)}, {"epoch_loss", r.epoch_loss}});
        return exit_code::ok;
    }
};

struct SelectCmd {
    std::string data, out, mode = "misclassify";
    std::size_t k = 16;
    std::uint64_t seed = 0;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("select", "draw a forget manifest");
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        sub->add_option("--out", out, "manifest path")->required();
        sub->add_option("--k", k, "number of instances")->check(CLI::PositiveNumber);
        sub->add_option("--mode", mode)->check(CLI::IsMember({"misclassify", "relabel"}));
        add_seed(sub, seed);
    }

    int run(const CLI::App&) const {
        const Dataset ds = load_dataset(data);
        const auto m = select_forget_set(ds, k, forget_mode_from_string(mode), seed);
        save_manifest(out, m);
        emit({{"manifest", out}, {"k", m.size()}, {"mode", to_string(m.mode)}});
        return exit_code::ok;
    }
};

struct AttackCmd {
    std::string checkpoint, data, manifest, out, target_policy = "per_image";
    AttackConfig attack;
    std::size_t n_adv = 20;
    std::uint64_t seed = 0;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("attack", "generate targeted adversarial examples for a forget set");
        add_existing_path(sub, "--checkpoint", checkpoint, "model checkpoint")->required();
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        add_existing_path(sub, "--manifest", manifest, "forget manifest")->required();
        sub->add_option("--out", out, "adversarial set path")->required();
        sub->add_option("--n-adv", n_adv);
        sub->add_option("--eps", attack.epsilon);
        sub->add_option("--attack-steps", attack.iterations);
        sub->add_option("--attack-lr", attack.step_size);
        sub->add_option("--random-start", attack.random_start);
        sub->add_option("--clamp-pixels", attack.clamp_pixels);
        sub->add_option("--target-policy", target_policy)->check(CLI::IsMember({"per_image", "per_example"}));
        add_seed(sub, seed);
    }

    int run(const CLI::App&) const {
        const auto s = load_checkpoint(checkpoint);
        const Dataset train = load_dataset(data);
        const auto m = load_manifest(manifest);
        m.validate_against(train);
        AttackConfig cfg = attack;
        cfg.seed = seed;
        const auto forget = split_remaining(train, m).first;
        const auto set = generate_adversarial_set(s, forget, n_adv, cfg, target_policy_from_string(target_policy));
        save_adversarial_set(out, set);
        emit({{"adversarial_set", out},
              {"records", set.size()},
              {"targeted_success", percent(accuracy(s, adversarial_dataset(set)))}});
        return exit_code::ok;
    }
};

struct ImportanceCmd {
    std::string checkpoint, data, manifest, out, on = "logits";
    bool raw = false;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("importance", "measure parameter importance on a forget set");
        add_existing_path(sub, "--checkpoint", checkpoint, "model checkpoint")->required();
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        add_existing_path(sub, "--manifest", manifest, "forget manifest")->required();
        sub->add_option("--out", out, "importance map path")->required();
        sub->add_option("--importance-on", on)->check(CLI::IsMember({"logits", "probabilities"}));
        sub->add_option("--raw", raw, "store the raw map instead of the inverted normalized one");
    }

    int run(const CLI::App&) const {
        const auto s = load_checkpoint(checkpoint);
        const Dataset train = load_dataset(data);
        const auto m = load_manifest(manifest);
        m.validate_against(train);
        auto omega = mas_importance(s, split_remaining(train, m).first, importance_on_from_string(on));
        if (!raw) omega = invert(normalize_layerwise(omega));
        save_importance(out, omega);
        emit({{"importance", out}, {"kind", to_string(omega.kind)}, {"parameters", omega.values.count()}});
        return exit_code::ok;
    }
};

struct UnlearnCmd {
    std::string checkpoint, data, test, manifest, out, mode = "misclassify", adversarial, importance;
    std::size_t k = 0;
    bool monitor = false;
    std::uint64_t seed = 0;
    UnlearnArgs ul;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("unlearn", "unlearn a forget set and write a run directory");
        add_existing_path(sub, "--checkpoint", checkpoint, "pretrained checkpoint")->required();
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        add_existing_path(sub, "--test", test, "test dataset directory");
        add_existing_path(sub, "--manifest", manifest, "forget manifest (otherwise drawn with --k)");
        sub->add_option("--k", k, "forget set size when no manifest is given");
        sub->add_option("--mode", mode)->check(CLI::IsMember({"misclassify", "relabel"}));
        sub->add_option("--out", out, "run directory")->required();
        add_existing_path(sub, "--adversarial", adversarial, "precomputed adversarial set");
        add_existing_path(sub, "--importance", importance, "precomputed inverted importance map");
        sub->add_option("--monitor", monitor, "record D_r accuracy in the trace");
        ul.add(sub);
        add_seed(sub, seed);
    }

    int run(const CLI::App& sub) const {
        const auto s0 = load_checkpoint(checkpoint);
        const Dataset train = load_dataset(data);
        const auto test_ds = load_optional_dataset(test);
        const auto m = resolve_manifest(manifest, train, k, mode, seed);
        const auto cfg = ul.resolve(seed);
        std::optional<AdversarialSet> adv;
        std::optional<ImportanceMap> imp;
        if (!adversarial.empty()) adv = load_adversarial_set(adversarial);
        if (!importance.empty()) imp = load_importance(importance);
        if (imp && !imp->inverted()) throw UsageError("--importance must hold an inverted normalized map");
        RunContext ctx{&s0, &train, test_ds ? &*test_ds : nullptr, adv ? &*adv : nullptr, imp ? &*imp : nullptr,
                       monitor};
        auto result = run_single(ctx, m, cfg, resolved_options(sub), out);
        result["run"] = out;
        emit(result);
        return exit_code::ok;
    }
};

struct ContinualCmd {
    std::string checkpoint, data, test, manifest, out, mode = "misclassify";
    std::size_t k = 0, k_cl = 8;
    bool monitor = false;
    std::uint64_t seed = 0;
    UnlearnArgs ul;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("continual", "unlearn a manifest as a stream of fragments");
        add_existing_path(sub, "--checkpoint", checkpoint, "pretrained checkpoint")->required();
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        add_existing_path(sub, "--test", test, "test dataset directory");
        add_existing_path(sub, "--manifest", manifest, "forget manifest (otherwise drawn with --k)");
        sub->add_option("--k", k, "forget set size when no manifest is given");
        sub->add_option("--k-cl", k_cl, "fragment size")->check(CLI::PositiveNumber);
        sub->add_option("--mode", mode)->check(CLI::IsMember({"misclassify", "relabel"}));
        sub->add_option("--out", out, "run directory")->required();
        sub->add_option("--monitor", monitor, "record D_r accuracy in the trace");
        ul.add(sub);
        add_seed(sub, seed);
    }

    int run(const CLI::App& sub) const {
        const auto s0 = load_checkpoint(checkpoint);
        const Dataset train = load_dataset(data);
        const auto test_ds = load_optional_dataset(test);
        const auto m = resolve_manifest(manifest, train, k, mode, seed);
        const auto cfg = ul.resolve(seed);
        fs::create_directories(out);
        detail::write_json_file(fs::path(out) / "run_spec.json", resolved_options(sub));
        save_manifest(fs::path(out) / "manifest.json", m);
        const auto remain_all = split_remaining(train, m).second;
        Monitor mon{monitor ? &remain_all : nullptr, test_ds ? &*test_ds : nullptr};
        const auto fragments = run_continual(s0, train, m, k_cl, cfg, mon);

        std::vector<json> trace;
        json frag_summaries = json::array();
        for (std::size_t f = 0; f < fragments.size(); ++f) {
            for (const auto& rec : fragments[f].result.trace) {
                auto j = epoch_record_to_json(rec);
                j["fragment"] = f;
                trace.push_back(std::move(j));
            }
            auto j = unlearn_result_summary(fragments[f].result);
            j["fragment"] = f;
            j["ids"] = fragments[f].manifest.ids;
            frag_summaries.push_back(std::move(j));
        }
        write_trace(fs::path(out) / "trace.jsonl", trace);
        const ClassifierState& final_state = fragments.empty() ? s0 : fragments.back().result.state;
        UnlearnResult last = fragments.empty() ? UnlearnResult{s0} : fragments.back().result;
        save_checkpoint(fs::path(out) / "model.ckpt", tag_state(final_state, cfg, last, m.size()));
        const auto [forget, remain] = split_remaining(train, m);
        json result{{"method", to_string(cfg.method)},
                    {"k", m.size()},
                    {"k_cl", k_cl},
                    {"fragments", frag_summaries},
                    {"accuracies", accuracy_block(s0, final_state, forget, remain, test_ds ? &*test_ds : nullptr, m)}};
        detail::write_json_file(fs::path(out) / "result.json", result);
        result["run"] = out;
        emit(result);
        return exit_code::ok;
    }
};

struct EvalCmd {
    std::string before, after, data, manifest, test, out, run_id = "run", method;
    std::size_t max_examples = 512;
    bool cka = true;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("eval", "compare checkpoints before and after unlearning");
        add_existing_path(sub, "--before", before, "checkpoint before unlearning")->required();
        add_existing_path(sub, "--after", after, "checkpoint after unlearning")->required();
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        add_existing_path(sub, "--manifest", manifest, "forget manifest")->required();
        add_existing_path(sub, "--test", test, "test dataset directory");
        sub->add_option("--out", out, "report directory")->required();
        sub->add_option("--run-id", run_id);
        sub->add_option("--method", method, "method label for the CSV rows");
        sub->add_option("--max-examples", max_examples, "rows used for CKA");
        sub->add_option("--cka", cka, "compute layerwise CKA");
    }

    int run(const CLI::App&) const {
        const auto sb = load_checkpoint(before);
        const auto sa = load_checkpoint(after);
        const Dataset train = load_dataset(data);
        const auto test_ds = load_optional_dataset(test);
        const auto m = load_manifest(manifest);
        m.validate_against(train);
        const auto [forget, remain] = split_remaining(train, m);
        auto report = evaluate(sb, sa, forget, remain, test_ds ? *test_ds : Dataset{}, m,
                               EvalOptions{max_examples, cka, cka});
        report.metadata["run_id"] = run_id;
        if (!method.empty()) report.metadata["method"] = method;
        write_report_files(out, report, run_id, method, m.size());
        emit({{"report", out}, {"accuracies", report_to_json(report).at("accuracies")}});
        return exit_code::ok;
    }
};

struct SweepCmd {
    std::string checkpoint, data, test, out, methods, ks = "16", gammas, seeds, mode = "misclassify";
    std::size_t jobs = 1;
    bool cka = false, monitor = false;
    std::uint64_t seed = 0;
    UnlearnArgs ul;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("sweep", "grid of unlearning runs over methods, k, gamma and seeds");
        add_existing_path(sub, "--checkpoint", checkpoint, "pretrained checkpoint")->required();
        add_existing_path(sub, "--data", data, "training dataset directory")->required();
        add_existing_path(sub, "--test", test, "test dataset directory");
        sub->add_option("--out", out, "sweep directory")->required();
        sub->add_option("--methods", methods, "comma list (default neggrad,adv,adv_imp; rawp with --gammas)");
        sub->add_option("--ks", ks, "comma list of forget set sizes");
        sub->add_option("--gammas", gammas, "comma list of RAWP gamma values");
        sub->add_option("--seeds", seeds, "comma list of seeds (default --seed)");
        sub->add_option("--mode", mode)->check(CLI::IsMember({"misclassify", "relabel"}));
        sub->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
        sub->add_option("--cka", cka, "compute layerwise CKA per run");
        sub->add_option("--monitor", monitor, "record D_r accuracy in the traces");
        ul.add(sub);
        add_seed(sub, seed);
    }

    struct Cell {
        std::string name;
        Method method;
        std::size_t k;
        std::uint64_t seed;
        std::optional<double> gamma;
        std::string gamma_text;
    };

    int run(const CLI::App& sub) const {
        const auto s0 = load_checkpoint(checkpoint);
        const Dataset train = load_dataset(data);
        const auto test_ds = load_optional_dataset(test);
        const auto k_list = parse_list<std::size_t>(ks, "--ks");
        const auto gamma_names = split_names(gammas);
        const auto gamma_list = parse_list<double>(gammas, "--gammas");
        auto seed_list = parse_list<std::uint64_t>(seeds, "--seeds");
        if (seed_list.empty()) seed_list.push_back(seed);
        auto method_names = split_names(methods);
        if (method_names.empty())
            method_names = gamma_list.empty() ? std::vector<std::string>{"neggrad", "adv", "adv_imp"}
                                              : std::vector<std::string>{"rawp"};
        if (k_list.empty()) throw UsageError("--ks is empty");

        std::vector<Cell> cells;
        for (const auto& mname : method_names) {
            const auto method = method_from_string(mname);
            for (auto k : k_list)
                for (auto sd : seed_list) {
                    const std::string base = mname + "_k" + std::to_string(k) + "_s" + std::to_string(sd);
                    if (method == Method::rawp && !gamma_list.empty()) {
                        for (std::size_t g = 0; g < gamma_list.size(); ++g)
                            cells.push_back({base + "_g" + gamma_names[g], method, k, sd, gamma_list[g], gamma_names[g]});
                    } else {
                        cells.push_back({base, method, k, sd, std::nullopt, {}});
                    }
                }
        }

        fs::create_directories(out);
        const json base_spec = resolved_options(sub);
        detail::write_json_file(fs::path(out) / "sweep_spec.json", base_spec);
        std::vector<json> outcomes(cells.size());
        std::vector<std::string> csv_rows(cells.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next++; i < cells.size(); i = next++) {
                const auto& c = cells[i];
                const fs::path dir = fs::path(out) / c.name;
                json spec = base_spec;
                spec["subcommand"] = "unlearn";
                for (const char* key : {"methods", "ks", "gammas", "seeds", "jobs", "cka"}) spec.erase(key);
                spec["method"] = to_string(c.method);
                spec["k"] = std::to_string(c.k);
                spec["seed"] = std::to_string(c.seed);
                spec["out"] = dir.string();
                if (c.gamma) spec["gamma"] = c.gamma_text;
                json outcome{{"run", c.name}};
                try {
                    UnlearnArgs args = ul;
                    args.method = to_string(c.method);
                    if (c.gamma) args.cfg.gamma = *c.gamma;
                    const auto cfg = args.resolve(c.seed);
                    const auto m = select_forget_set(train, c.k, forget_mode_from_string(mode), c.seed);
                    RunContext ctx{&s0, &train, test_ds ? &*test_ds : nullptr, nullptr, nullptr, monitor};
                    outcome["result"] = run_single(ctx, m, cfg, spec, dir);
                    const auto after = load_checkpoint(dir / "model.ckpt");
                    const auto [forget, remain] = split_remaining(train, m);
                    auto report = evaluate(s0, after, forget, remain, test_ds ? *test_ds : Dataset{}, m,
                                           EvalOptions{512, cka, cka});
                    report.metadata["run_id"] = c.name;
                    report.metadata["method"] = to_string(c.method);
                    write_report_files(dir, report, c.name, to_string(c.method), c.k);
                    const auto csv = accuracies_csv(report, c.name, to_string(c.method), c.k);
                    csv_rows[i] = csv.substr(csv.find('\n') + 1);
                    outcome["status"] = "ok";
                } catch (const NumericError& e) {
                    outcome["status"] = "numeric_error";
                    outcome["message"] = e.what();
                }
                outcomes[i] = std::move(outcome);
            }
        };
        // Worker exceptions other than numeric divergence abort the sweep.
        std::vector<std::thread> pool;
        std::exception_ptr failure;
        std::mutex failure_mutex;
        const auto n_threads = std::min(jobs, std::max<std::size_t>(cells.size(), 1));
        for (std::size_t t = 0; t < n_threads; ++t)
            pool.emplace_back([&] {
                try {
                    worker();
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = cells.size();
                }
            });
        for (auto& th : pool) th.join();
        if (failure) std::rethrow_exception(failure);

        std::string csv = "run_id,method,k,split,state,accuracy\n";
        for (const auto& rows : csv_rows) csv += rows;
        detail::write_text_file(fs::path(out) / "accuracies.csv", csv);
        json summary{{"runs", outcomes}};
        detail::write_json_file(fs::path(out) / "sweep.json", summary);
        std::size_t failed = 0;
        for (const auto& o : outcomes) failed += o.at("status") != "ok";
        emit({{"sweep", out}, {"runs", cells.size()}, {"numeric_errors", failed}});
        return exit_code::ok;
    }
};

void print_error(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << std::endl;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"unlearnkit: instance-wise unlearning toolkit", "unlearnkit"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    SynthCmd synth;
    PretrainCmd pretrain_cmd;
    SelectCmd select;
    AttackCmd attack;
    ImportanceCmd importance;
    UnlearnCmd unlearn;
    ContinualCmd continual;
    EvalCmd eval;
    SweepCmd sweep;
    synth.add(app);
    pretrain_cmd.add(app);
    select.add(app);
    attack.add(app);
    importance.add(app);
    unlearn.add(app);
    continual.add(app);
    eval.add(app);
    sweep.add(app);
    std::string config_path;
    for (auto* sub : app.get_subcommands({}))
        sub->add_option("--config", config_path, "JSON or key=value file; flags take precedence")->check(CLI::ExistingFile);

    try {
        std::vector<std::string> expanded = args;
        if (!args.empty())
            if (auto* sub = app.get_subcommand_no_throw(args.front())) expanded = expand_config(*sub, args);
        std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what(), exit_code::usage);
        return exit_code::usage;
    } catch (const Error& e) {
        print_error(e.kind(), e.what(), exit_code::usage);
        return exit_code::usage;
    }

    try {
        const CLI::App* sub = app.get_subcommands().front();
        const auto& name = sub->get_name();
        if (name == "synth") return synth.run(*sub);
        if (name == "pretrain") return pretrain_cmd.run(*sub);
        if (name == "select") return select.run(*sub);
        if (name == "attack") return attack.run(*sub);
        if (name == "importance") return importance.run(*sub);
        if (name == "unlearn") return unlearn.run(*sub);
        if (name == "continual") return continual.run(*sub);
        if (name == "eval") return eval.run(*sub);
        if (name == "sweep") return sweep.run(*sub);
        return exit_code::usage;
    } catch (const NumericError& e) {
        print_error(e.kind(), e.what(), exit_code::numeric);
        return exit_code::numeric;
    } catch (const Error& e) {
        // Bad arguments, missing or malformed inputs and manifests that do not fit the data.
        print_error(e.kind(), e.what(), exit_code::usage);
        return exit_code::usage;
    } catch (const std::exception& e) {
        print_error("internal", e.what(), exit_code::failure);
        return exit_code::failure;
    }
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace unlearnkit
