#include "tc/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "tc/attribution.hpp"
#include "tc/checkpoint.hpp"
#include "tc/circuits.hpp"
#include "tc/corpus.hpp"
#include "tc/error.hpp"
#include "tc/eval.hpp"
#include "tc/model_train.hpp"
#include "tc/service.hpp"
#include "tc/trainer.hpp"

namespace tc::cli {

namespace {

namespace fs = std::filesystem;

struct Common {
    std::string model = "model.tcw1";
    std::string vocab = "vocab.txt";
    std::string corpus;
    std::string out;
    std::string model_out = "model.tcw1";
    std::string pairs_out = "pairs.tcw1";
    std::string coder_out = "coder.tcw1";
    std::uint64_t seed = 42;
};

Vocab load_vocab(const std::string& path) {
    if (path.empty() || !fs::exists(path)) return Vocab::standard();
    return Vocab::load(path);
}

Corpus load_corpus(const std::string& path, const Vocab& vocab) {
    if (path.empty()) throw UsageError("--corpus is required");
    return Corpus::load(path, vocab);
}

// The corpus file if given, otherwise the 100 greater-than task prompts.
Corpus prompts_or_task(const std::string& path, const Vocab& vocab) {
    if (!path.empty()) return Corpus::load(path, vocab);
    Corpus c;
    c.prompts = gen_greater_than(vocab);
    c.descriptor = "greater-than";
    return c;
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
    if (path.empty() || path == "-") {
        out << text;
        return;
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    f << text;
    if (!f) throw Error("failed writing " + path);
}

std::map<std::size_t, Coder> load_coders(const std::vector<std::string>& paths) {
    std::map<std::size_t, Coder> out;
    for (const auto& p : paths) {
        Coder c = load_coder(p);
        const std::size_t layer = c.layer;
        if (!out.emplace(layer, std::move(c)).second) throw UsageError("two coders given for layer " + std::to_string(layer));
    }
    return out;
}

void add_train_flags(CLI::App* app, TrainConfig& cfg, bool single_lambda) {
    if (single_lambda) app->add_option("--lambda1", cfg.lambda1, "sparsity coefficient lambda1");
    app->add_option("--lr", cfg.learning_rate, "Adam learning rate");
    app->add_option("--batch-size", cfg.batch_size, "activations per optimizer step");
    app->add_option("--context-len", cfg.context_len, "tokens per prompt used when harvesting");
    app->add_option("--total-tokens", cfg.total_tokens, "training activations to consume");
    app->add_option("--beta1", cfg.beta1, "Adam beta1");
    app->add_option("--beta2", cfg.beta2, "Adam beta2");
    app->add_option("--eps", cfg.eps, "Adam epsilon");
    app->add_option("--d-features-mult", cfg.d_features_multiplier, "d_features = multiplier * d_model");
    app->add_flag("--no-shuffle", [&cfg](std::int64_t) { cfg.shuffle = false; }, "keep batches in corpus order");
}

ActivationPairStream harvest_for(const ModelParams& params, const Corpus& corpus, std::size_t layer, std::size_t limit,
                                 std::size_t context_len) {
    Corpus clipped = corpus;
    for (auto& p : clipped.prompts) {
        if (p.size() > context_len) p.resize(context_len);
    }
    return harvest(params, clipped, layer, limit);
}

std::vector<std::size_t> default_ks(std::size_t n_units) {
    std::vector<std::size_t> ks{0};
    for (std::size_t k = 1; k < n_units; k *= 2) ks.push_back(k);
    ks.push_back(n_units);
    return ks;
}

} // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"tc: transcoder training and weights-based circuit analysis"};
    app.name("tc");
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    Common c;
    std::function<void()> run;
    auto common_model = [&c](CLI::App* s) {
        s->add_option("--model", c.model, "model checkpoint (TCW1)");
        s->add_option("--vocab", c.vocab, "vocabulary file; the built-in vocabulary is used when it does not exist");
    };

    // gen-corpus
    std::string descriptor = "toy-v1";
    std::size_t n_tokens = 200000;
    bool task = false;
    std::string vocab_out;
    {
        auto* s = app.add_subcommand("gen-corpus", "generate a synthetic corpus and its vocabulary");
        s->add_option("--descriptor", descriptor, "generator mixture");
        s->add_option("--seed", c.seed, "generator seed");
        s->add_option("--n-tokens", n_tokens, "approximate corpus size in tokens");
        s->add_flag("--task", task, "write the 100 greater-than task prompts instead");
        s->add_option("--out", c.out, "corpus file")->required();
        s->add_option("--vocab-out", vocab_out, "vocabulary file to write");
        s->callback([&] {
            run = [&] {
                const Vocab vocab = Vocab::standard();
                Corpus corpus;
                if (task) {
                    corpus.prompts = gen_greater_than(vocab);
                } else {
                    corpus = gen_synthetic_corpus(descriptor, c.seed, n_tokens, vocab);
                }
                corpus.save(c.out, vocab);
                if (!vocab_out.empty()) vocab.save(vocab_out);
                out << "wrote " << corpus.prompts.size() << " prompts (" << corpus.token_count() << " tokens) to " << c.out
                    << "\n";
            };
        });
    }

    // train-model
    ModelConfig mcfg;
    ModelTrainConfig mtrain;
    std::string activation = "gelu";
    std::string log_path;
    {
        auto* s = app.add_subcommand("train-model", "train the toy transformer on a corpus");
        s->add_option("--corpus", c.corpus, "training corpus")->required();
        s->add_option("--vocab", c.vocab, "vocabulary file");
        s->add_option("--out", c.model_out, "model checkpoint to write");
        s->add_option("--layers", mcfg.n_layers, "transformer blocks");
        s->add_option("--heads", mcfg.n_heads, "attention heads per block");
        s->add_option("--d-model", mcfg.d_model, "residual width");
        s->add_option("--d-head", mcfg.d_head, "head width");
        s->add_option("--d-mlp", mcfg.d_mlp, "MLP hidden width");
        s->add_option("--context", mcfg.context_len, "context length");
        s->add_option("--activation", activation, "MLP nonlinearity")->check(CLI::IsMember({"gelu", "relu"}));
        s->add_option("--steps", mtrain.steps, "optimizer steps");
        s->add_option("--batch", mtrain.batch_size, "prompts per step");
        s->add_option("--lr", mtrain.learning_rate, "Adam learning rate");
        s->add_option("--weight-decay", mtrain.weight_decay, "decoupled weight decay on matrices");
        s->add_option("--seed", mtrain.seed, "initialization and sampling seed");
        s->add_flag("--linear-decay", mtrain.linear_decay, "decay the learning rate linearly to zero");
        s->add_option("--log", log_path, "write step,loss CSV here");
        s->callback([&] {
            run = [&] {
                const Vocab vocab = load_vocab(c.vocab);
                const Corpus corpus = load_corpus(c.corpus, vocab);
                mcfg.vocab_size = vocab.size();
                mcfg.activation = activation == "relu" ? Activation::relu : Activation::gelu;
                std::vector<ModelTrainStep> log;
                const ModelParams params = train_model(mcfg, corpus, mtrain, &log);
                save_checkpoint(params, c.model_out);
                if (!log_path.empty()) {
                    std::ostringstream csv;
                    csv << "step,loss\n";
                    for (const auto& r : log) csv << r.step << ',' << r.loss << '\n';
                    emit(csv.str(), log_path, out);
                }
                out << "final loss " << (log.empty() ? 0.0 : log.back().loss) << ", wrote " << c.model_out << "\n";
            };
        });
    }

    // harvest
    std::size_t layer = 0;
    std::size_t limit = 1000000;
    TrainConfig tcfg;
    {
        auto* s = app.add_subcommand("harvest", "collect (MLP input, MLP output) pairs from one layer");
        common_model(s);
        s->add_option("--corpus", c.corpus, "corpus file")->required();
        s->add_option("--layer", layer, "MLP layer")->required();
        s->add_option("--limit", limit, "maximum number of pairs");
        s->add_option("--context-len", tcfg.context_len, "tokens per prompt");
        s->add_option("--out", c.pairs_out, "pairs file (TCW1)");
        s->callback([&] {
            run = [&] {
                const ModelParams params = load_model(c.model);
                const Vocab vocab = load_vocab(c.vocab);
                const auto stream = harvest_for(params, load_corpus(c.corpus, vocab), layer, limit, tcfg.context_len);
                save_pairs(stream, c.pairs_out);
                out << "wrote " << stream.size() << " pairs to " << c.pairs_out << "\n";
            };
        });
    }

    // train-coder
    std::string pairs_path;
    std::string kind = "transcoder";
    {
        auto* s = app.add_subcommand("train-coder", "train a transcoder or SAE");
        common_model(s);
        s->add_option("--pairs", pairs_path, "pairs file from `tc harvest`; otherwise harvest from --corpus");
        s->add_option("--corpus", c.corpus, "corpus to harvest from when --pairs is absent");
        s->add_option("--layer", layer, "MLP layer when harvesting");
        s->add_option("--limit", limit, "maximum harvested pairs");
        s->add_option("--kind", kind, "coder kind")->check(CLI::IsMember({"transcoder", "sae"}));
        s->add_option("--seed", tcfg.seed, "initialization and shuffling seed");
        add_train_flags(s, tcfg, true);
        s->add_option("--out", c.coder_out, "coder checkpoint to write");
        s->add_option("--log", log_path, "training log CSV");
        s->callback([&] {
            run = [&] {
                ActivationPairStream stream;
                if (!pairs_path.empty()) {
                    stream = load_pairs(pairs_path);
                } else {
                    const ModelParams params = load_model(c.model);
                    stream = harvest_for(params, load_corpus(c.corpus, load_vocab(c.vocab)), layer, limit, tcfg.context_len);
                }
                const TrainResult r = train_coder(tcfg, stream, coder_kind_from_string(kind));
                save_checkpoint(r.coder, c.coder_out);
                if (!log_path.empty()) emit(training_log_csv(r.log), log_path, out);
                const auto& last = r.log.back();
                out << "step " << last.step << " faithfulness " << last.faithfulness << " l0 " << last.l0 << ", wrote "
                    << c.coder_out << "\n";
            };
        });
    }

    // sweep
    std::vector<float> lambdas;
    std::vector<std::string> kinds{"transcoder"};
    std::string eval_corpus_path;
    std::string save_dir;
    {
        auto* s = app.add_subcommand("sweep", "train one coder per lambda1 and report sparsity against cross entropy");
        common_model(s);
        s->add_option("--corpus", c.corpus, "training corpus")->required();
        s->add_option("--eval-corpus", eval_corpus_path, "evaluation corpus (defaults to --corpus)");
        s->add_option("--layer", layer, "MLP layer");
        s->add_option("--limit", limit, "maximum harvested pairs");
        s->add_option("--lambda1", lambdas, "comma-separated lambda1 values")->delimiter(',')->required();
        s->add_option("--kinds", kinds, "coder kinds")->delimiter(',')->check(CLI::IsMember({"transcoder", "sae"}));
        s->add_option("--seed", tcfg.seed, "seed shared by every run");
        add_train_flags(s, tcfg, false);
        s->add_option("--out", c.out, "summary CSV (stdout when omitted)");
        s->add_option("--save-dir", save_dir, "directory for the trained coders");
        s->callback([&] {
            run = [&] {
                const ModelParams params = load_model(c.model);
                const Vocab vocab = load_vocab(c.vocab);
                const Corpus corpus = load_corpus(c.corpus, vocab);
                const Corpus eval_corpus = eval_corpus_path.empty() ? corpus : Corpus::load(eval_corpus_path, vocab);
                const auto stream = harvest_for(params, corpus, layer, limit, tcfg.context_len);
                std::vector<CoderKind> ks;
                for (const auto& k : kinds) ks.push_back(coder_kind_from_string(k));
                const SweepResult r = sweep(tcfg, lambdas, stream, ks, params, eval_corpus);
                if (!save_dir.empty()) {
                    fs::create_directories(save_dir);
                    for (const auto& row : r.runs) {
                        if (!row.coder) continue;
                        std::ostringstream name;
                        name << to_string(row.kind) << "_l" << layer << "_lambda" << row.lambda1 << ".tcw1";
                        save_checkpoint(*row.coder, fs::path(save_dir) / name.str());
                    }
                }
                emit(r.to_csv(), c.out, out);
                for (const auto& row : r.runs) {
                    if (row.error) err << "run lambda1=" << row.lambda1 << " failed: " << *row.error << "\n";
                }
            };
        });
    }

    // eval
    std::vector<std::string> coder_paths;
    {
        auto* s = app.add_subcommand("eval", "mean L0 and cross entropy with the coder substituted or mean-ablated");
        common_model(s);
        s->add_option("--coder", coder_paths, "coder checkpoint")->required()->expected(1);
        s->add_option("--corpus", c.corpus, "evaluation corpus")->required();
        s->add_option("--out", c.out, "report CSV (stdout when omitted)");
        s->callback([&] {
            run = [&] {
                const ModelParams params = load_model(c.model);
                const Coder coder = load_coder(coder_paths.at(0));
                const EvalReport rep = evaluate(params, coder, load_corpus(c.corpus, load_vocab(c.vocab)));
                emit(rep.to_csv(), c.out, out);
                if (!rep.ordering_ok) err << "note: cross entropies are not ordered original <= replaced <= mean-ablated\n";
            };
        });
    }

    // trace
    std::size_t prompt_id = 0, feature = 0, token = 0, beam = 1, depth = 1;
    bool rank_abs = false, no_errors = false;
    std::string format = "json";
    {
        auto* s = app.add_subcommand("trace", "greedy computational-path search from one transcoder feature");
        common_model(s);
        s->add_option("--coder", coder_paths, "transcoder checkpoints (repeatable, one per layer)")->required();
        s->add_option("--prompts", c.corpus, "prompt file (defaults to the greater-than task prompts)");
        s->add_option("--prompt-id", prompt_id, "prompt index")->required();
        s->add_option("--layer", layer, "root feature layer")->required();
        s->add_option("--feature", feature, "root feature index")->required();
        s->add_option("--token", token, "root token position")->required();
        s->add_option("--N", beam, "beam width N");
        s->add_option("--L", depth, "search depth L");
        s->add_flag("--rank-abs", rank_abs, "rank candidates by absolute attribution");
        s->add_flag("--no-errors", no_errors, "omit error nodes");
        s->add_option("--format", format, "output format")->check(CLI::IsMember({"json", "dot"}));
        s->add_option("--out", c.out, "graph file (stdout when omitted)");
        s->callback([&] {
            run = [&] {
                const ModelParams params = load_model(c.model);
                const Vocab vocab = load_vocab(c.vocab);
                const Corpus prompts = prompts_or_task(c.corpus, vocab);
                if (prompt_id >= prompts.prompts.size()) throw UsageError("--prompt-id out of range");
                const auto coders = load_coders(coder_paths);
                const auto& p = prompts.prompts[prompt_id];
                const std::vector<int> toks(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(std::min(p.size(), params.config.context_len)));
                const ActivationCache cache = forward_with_cache(params, toks);
                std::map<std::size_t, const Coder*> ptrs;
                for (const auto& [l, cd] : coders) ptrs[l] = &cd;
                const SearchContext ctx(params, cache, ptrs);
                const FeatureHandle root{layer, feature, token};
                if (!(root_node(ctx, root).active)) err << "warning: root feature is not active on this prompt\n";
                CircuitGraph g = paths_to_graph(greedy_paths(ctx, root, {depth, beam, rank_abs}));
                if (!no_errors) add_error_nodes(g, ctx);
                emit(format == "dot" ? export_dot(g) : export_json(g), c.out, out);
            };
        });
    }

    // deembed
    std::size_t top_k = 10;
    std::string via_head;
    std::size_t top_m = 10;
    std::optional<std::size_t> dla_prompt;
    {
        auto* s = app.add_subcommand("deembed", "rank vocabulary tokens by W_E f_enc, DLA, or weighted de-embedding");
        common_model(s);
        s->add_option("--coder", coder_paths, "coder checkpoint (a second one gives the lower layer for --via-head)")
            ->required();
        s->add_option("--feature", feature, "feature index")->required();
        s->add_option("--k", top_k, "rows to print");
        s->add_option("--dla-prompt", dla_prompt, "rank by direct logit attribution on this prompt instead");
        s->add_option("--prompts", c.corpus, "prompt file for --dla-prompt (defaults to the task prompts)");
        s->add_option("--token", token, "token position for --dla-prompt");
        s->add_option("--via-head", via_head, "LAYER.HEAD: weighted de-embedding through this head");
        s->add_option("--top-m", top_m, "lower features used by --via-head");
        s->add_option("--out", c.out, "CSV file (stdout when omitted)");
        s->callback([&] {
            run = [&] {
                const ModelParams params = load_model(c.model);
                const Vocab vocab = load_vocab(c.vocab);
                const Vocab* names = vocab.size() == params.config.vocab_size ? &vocab : nullptr;
                const Coder coder = load_coder(coder_paths.at(0));
                if (feature >= coder.d_features()) throw UsageError("--feature out of range");
                std::vector<std::pair<int, double>> ranked;
                if (!via_head.empty()) {
                    if (coder_paths.size() < 2) throw UsageError("--via-head needs a second --coder for the lower layer");
                    const Coder lower = load_coder(coder_paths.at(1));
                    const auto dot = via_head.find('.');
                    if (dot == std::string::npos) throw UsageError("--via-head expects LAYER.HEAD");
                    const std::size_t hl = std::stoul(via_head.substr(0, dot)), h = std::stoul(via_head.substr(dot + 1));
                    ranked = top_scores(weighted_deembedding_scores(params, coder, feature, hl, h, lower, top_m), top_k);
                } else if (dla_prompt) {
                    const Corpus prompts = prompts_or_task(c.corpus, vocab);
                    if (*dla_prompt >= prompts.prompts.size()) throw UsageError("--dla-prompt out of range");
                    const ActivationCache cache = forward_with_cache(params, prompts.prompts[*dla_prompt]);
                    ranked = top_scores(dla(coder, feature, cache, token, params), top_k);
                } else {
                    ranked = deembed(coder.f_enc(feature), params.W_E, top_k);
                }
                emit(scores_csv(ranked, names), c.out, out);
            };
        });
    }

    // ablate
    std::string unit = "transcoder_features";
    std::vector<std::size_t> ks;
    {
        auto* s = app.add_subcommand("ablate", "top-k zero-ablation curve on the greater-than task");
        common_model(s);
        s->add_option("--coder", coder_paths, "transcoder checkpoint (for transcoder_features)");
        s->add_option("--layer", layer, "MLP layer")->required();
        s->add_option("--unit", unit, "units to ablate")->check(CLI::IsMember({"transcoder_features", "mlp_neurons"}));
        s->add_option("--ks", ks, "comma-separated k values (default: 0, powers of two, all)")->delimiter(',');
        s->add_option("--out", c.out, "curve CSV (stdout when omitted)");
        s->callback([&] {
            run = [&] {
                const ModelParams params = load_model(c.model);
                const AblationUnit u = ablation_unit_from_string(unit);
                std::optional<Coder> coder;
                if (u == AblationUnit::transcoder_features) {
                    if (coder_paths.empty()) throw UsageError("--coder is required for transcoder_features");
                    coder = load_coder(coder_paths.at(0));
                }
                const std::size_t n_units = u == AblationUnit::mlp_neurons ? params.config.d_mlp : coder->d_features();
                if (ks.empty()) ks = default_ks(n_units);
                const AblationCurve curve = topk_ablation_curve(params, YearTask::standard(load_vocab(c.vocab)), u, layer,
                                                                coder ? &*coder : nullptr, ks);
                emit(curve.to_csv(), c.out, out);
                err << "original " << curve.original << ", full " << curve.full_reference << ", zero floor "
                    << curve.zero_floor << "\n";
            };
        });
    }

    // serve
    std::string host = "127.0.0.1";
    int port = 8080;
    bool blind = false;
    {
        auto* s = app.add_subcommand("serve", "HTTP API over a loaded model, coders and prompts");
        common_model(s);
        s->add_option("--coder", coder_paths, "coder checkpoints (repeatable)");
        s->add_option("--corpus", c.corpus, "prompt file (defaults to the greater-than task prompts)");
        s->add_option("--host", host, "bind address");
        s->add_option("--port", port, "bind port");
        s->add_flag("--blind", blind, "strip token text from every response");
        s->callback([&] {
            run = [&] {
                auto session = std::make_unique<Session>();
                session->params = load_model(c.model);
                session->vocab = load_vocab(c.vocab);
                session->corpus = prompts_or_task(c.corpus, session->vocab);
                session->coders = load_coders(coder_paths);
                session->blind = blind;
                out << "serving on " << host << ":" << port << std::endl;
                serve(*session, host, port);
            };
        });
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (run) run();
        return 0;
    } catch (const UsageError& e) {
        err << "tc: " << e.what() << "\n";
        return 1;
    } catch (const TrainingError& e) {
        err << "tc: training failed at step " << e.step() << ": " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "tc: " << e.what() << "\n";
        return 2;
    }
}

} // namespace tc::cli
