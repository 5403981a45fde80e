#include "tc/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "tc/error.hpp"

namespace tc {

namespace {

const std::vector<std::string> kEvents = {"war", "siege", "reign", "drought", "plague", "treaty",
                                          "famine", "voyage", "festival", "strike", "revolt", "winter"};
const std::vector<std::string> kSpanVerbs = {"lasted", "ran", "continued", "raged"};
const std::vector<std::string> kAnimals = {"cat", "dog", "horse", "bird", "fox", "goat", "king", "queen", "farmer", "child"};
const std::vector<std::string> kAdjectives = {"old", "young", "small", "big", "quiet", "brave", "red", "tired"};
const std::vector<std::string> kActions = {"saw", "found", "chased", "liked", "watched", "carried", "built", "sold"};
const std::vector<std::string> kObjects = {"house", "river", "bread", "stone", "ship", "tree", "road", "bell"};
const std::vector<std::string> kHappened = {"began", "ended", "started", "returned", "spread"};
const std::vector<std::string> kMisc = {"the", "from", "to", "in", "and", ".", "a", "was", "long", "short"};

std::string two_digit(int yy) {
    char buf[12];
    std::snprintf(buf, sizeof buf, "%02d", yy);
    return buf;
}

} // namespace

Vocab Vocab::standard() {
    std::vector<std::string> toks = {"<bos>", "<pad>"};
    for (int y = 0; y < 100; ++y) toks.push_back(two_digit(y));
    for (const auto* list : {&kMisc, &kEvents, &kSpanVerbs, &kAnimals, &kAdjectives, &kActions, &kObjects, &kHappened}) {
        for (const auto& w : *list) toks.push_back(w);
    }
    return from_tokens(std::move(toks));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        const auto& t = v.tokens_[i];
        if (t.empty()) throw InputError("vocab: empty token at id " + std::to_string(i));
        if (!v.index_.emplace(t, static_cast<int>(i)).second) throw InputError("vocab: duplicate token '" + t + "'");
        v.max_len_ = std::max(v.max_len_, t.size());
    }
    return v;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw InputError("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? -1 : it->second;
}

int Vocab::year_token(int yy) const {
    if (yy < 0 || yy >= 100) throw InputError("vocab: year " + std::to_string(yy) + " out of range");
    const int id = kYearBase + yy;
    if (static_cast<std::size_t>(id) >= tokens_.size() || tokens_[static_cast<std::size_t>(id)] != two_digit(yy)) {
        throw InputError("vocab: year tokens are not at the standard ids");
    }
    return id;
}

std::vector<int> Vocab::tokenize(std::string_view text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        std::size_t end = i;
        while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;
        std::size_t pos = i;
        while (pos < end) {
            int match = -1;
            std::size_t match_len = 0;
            for (std::size_t len = std::min(max_len_, end - pos); len >= 1; --len) {
                const int id = this->id(text.substr(pos, len));
                if (id >= 0) {
                    match = id;
                    match_len = len;
                    break;
                }
            }
            if (match < 0) {
                throw InputError("tokenize: unknown token at offset " + std::to_string(pos) + ": '" +
                                 std::string(text.substr(pos, end - pos)) + "'");
            }
            ids.push_back(match);
            pos += match_len;
        }
        i = end;
    }
    return ids;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        toks.push_back(line);
    }
    return from_tokens(std::move(toks));
}

std::size_t Corpus::token_count() const {
    std::size_t n = 0;
    for (const auto& p : prompts) n += p.size();
    return n;
}

void Corpus::save(const std::filesystem::path& path, const Vocab& vocab) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    for (const auto& p : prompts) out << vocab.detokenize(p) << '\n';
}

Corpus Corpus::load(const std::filesystem::path& path, const Vocab& vocab) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    Corpus c;
    c.descriptor = "file:" + path.filename().string();
    std::string line;
    while (std::getline(in, line)) {
        auto ids = vocab.tokenize(line);
        if (!ids.empty()) c.prompts.push_back(std::move(ids));
    }
    return c;
}

std::string greater_than_text(int yy) { return "<bos> the war lasted from 17 " + two_digit(yy) + " to 17"; }

std::vector<std::vector<int>> gen_greater_than(const Vocab& vocab) {
    for (const char* w : {"<bos>", "the", "war", "lasted", "from", "to", "17"}) {
        if (!vocab.contains(w)) throw InputError(std::string("gen_greater_than: vocab lacks template token '") + w + "'");
    }
    std::vector<std::vector<int>> prompts;
    prompts.reserve(100);
    for (int yy = 0; yy < 100; ++yy) prompts.push_back(vocab.tokenize(greater_than_text(yy)));
    return prompts;
}

Corpus gen_synthetic_corpus(std::string_view descriptor, std::uint64_t seed, std::size_t n_tokens, const Vocab& vocab) {
    if (descriptor != "toy-v1") throw InputError("gen_synthetic_corpus: unknown descriptor '" + std::string(descriptor) + "'");
    if (n_tokens == 0) throw InputError("gen_synthetic_corpus: n_tokens must be positive");
    std::mt19937_64 rng(seed);
    auto pick = [&rng](const std::vector<std::string>& list) -> const std::string& {
        return list[std::uniform_int_distribution<std::size_t>(0, list.size() - 1)(rng)];
    };
    auto uniform = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    Corpus corpus;
    corpus.seed = seed;
    corpus.descriptor = std::string(descriptor);
    std::size_t total = 0;
    while (total < n_tokens) {
        std::string text = "<bos> ";
        const int kind = uniform(0, 9);
        if (kind < 5) {
            const int aa = uniform(0, 98);
            const int bb = uniform(aa + 1, 99);
            text += "the " + pick(kEvents) + " " + pick(kSpanVerbs) + " from 17 " + two_digit(aa) + " to 17 " +
                    two_digit(bb) + " .";
        } else if (kind < 7) {
            text += "in 17 " + two_digit(uniform(0, 99)) + " the " + pick(kEvents) + " " + pick(kHappened) + " .";
        } else if (kind < 9) {
            text += "the " + pick(kAdjectives) + " " + pick(kAnimals) + " " + pick(kActions) + " the " + pick(kObjects) +
                    " and a " + pick(kAdjectives) + " " + pick(kObjects) + " .";
        } else {
            text += "the " + pick(kEvents) + " was " + (uniform(0, 1) ? "long" : "short") + " .";
        }
        auto ids = vocab.tokenize(text);
        total += ids.size();
        corpus.prompts.push_back(std::move(ids));
    }
    return corpus;
}

} // namespace tc
