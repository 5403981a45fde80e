#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tc {

// Word-level vocabulary. Ids 0/1 are <bos>/<pad>; the 100 two-digit year
// tokens "00".."99" occupy the contiguous ids [year_base, year_base + 100).
class Vocab {
public:
    static constexpr int kBos = 0;
    static constexpr int kPad = 1;
    static constexpr int kYearBase = 2;

    // The built-in toy vocabulary.
    static Vocab standard();
    // Arbitrary token list (one per id); InputError on duplicates.
    static Vocab from_tokens(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(int id) const;
    int id(std::string_view token) const; // -1 if absent
    bool contains(std::string_view token) const { return id(token) >= 0; }
    int year_token(int yy) const; // yy in [0, 100)
    bool is_year(int id) const { return id >= kYearBase && id < kYearBase + 100; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    /// Greedy longest match inside each whitespace-separated word; InputError
    /// names the first span that matches no token.
    std::vector<int> tokenize(std::string_view text) const;
    std::string detokenize(const std::vector<int>& ids) const;

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    std::size_t max_len_ = 0;
};

struct Corpus {
    std::vector<std::vector<int>> prompts;
    std::uint64_t seed = 0;
    std::string descriptor;

    std::size_t token_count() const;

    // one prompt per line, tokens space separated
    void save(const std::filesystem::path& path, const Vocab& vocab) const;
    static Corpus load(const std::filesystem::path& path, const Vocab& vocab);
};

// "<bos> the war lasted from 17 YY to 17" for YY = 00..99, in order.
std::vector<std::vector<int>> gen_greater_than(const Vocab& vocab);
std::string greater_than_text(int yy);

// The descriptor selects a generator mixture; "toy-v1" is the only one.
// Span-date sentences "the <event> <verb> from 17 AA to 17 BB ." always have
// BB > AA. Generation stops at the first prompt boundary at or past n_tokens.
Corpus gen_synthetic_corpus(std::string_view descriptor, std::uint64_t seed, std::size_t n_tokens,
                            const Vocab& vocab);

} // namespace tc
