#include "latdial/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <tuple>

#include "latdial/errors.hpp"
#include "latdial/serialize.hpp"

namespace latdial {

namespace {

const std::array<std::string, special::kCount> kSpecialNames = {"<pad>", "<bos>", "<eos>", "<sep>", "<latent>"};

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

// Words with their leading space; the first word has none.
std::vector<std::string> split_words(const std::string& normalized) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < normalized.size()) {
        std::size_t j = normalized.find(' ', i + 1);
        if (j == std::string::npos) j = normalized.size();
        words.push_back(normalized.substr(i, j - i));
        i = j;
    }
    return words;
}

std::string escape_token(const std::string& tok) {
    std::string out;
    for (unsigned char c : tok) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case ' ': out += "\\s"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '#': out += "\\x23"; break;
            default:
                if (c < 0x20 || c >= 0x7f) {
                    static const char* hex = "0123456789abcdef";
                    out += "\\x";
                    out += hex[c >> 4];
                    out += hex[c & 15];
                } else {
                    out += static_cast<char>(c);
                }
        }
    }
    return out;
}

std::string unescape_token(std::string_view s, std::size_t line_no) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '\\') {
            out += s[i];
            continue;
        }
        if (++i >= s.size()) throw ValidationError("dangling escape on vocab line " + std::to_string(line_no));
        switch (s[i]) {
            case '\\': out += '\\'; break;
            case 's': out += ' '; break;
            case 'n': out += '\n'; break;
            case 't': out += '\t'; break;
            case 'x': {
                if (s.size() < i + 3)
                    throw ValidationError("bad hex escape on vocab line " + std::to_string(line_no));
                out += static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16));
                i += 2;
                break;
            }
            default: throw ValidationError("unknown escape on vocab line " + std::to_string(line_no));
        }
    }
    return out;
}

}  // namespace

std::string normalize_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (unsigned char c : text) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
    }
    return out;
}

std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream is(normalize_text(text));
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
    return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::rebuild_index() {
    byte_id_.fill(-1);
    for (std::size_t id = special::kCount; id < tokens_.size(); ++id) {
        if (tokens_[id].size() == 1) {
            const auto b = static_cast<unsigned char>(tokens_[id][0]);
            if (byte_id_[b] < 0) byte_id_[b] = static_cast<int>(id);
        }
    }
    merge_index_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
        const int merged = static_cast<int>(tokens_.size() - merges_.size() + r);
        merge_index_[merges_[r]] = {static_cast<int>(r), merged};
    }
}

void Vocab::encode_word(std::string_view word, std::vector<int>& out) const {
    std::vector<int> sym;
    sym.reserve(word.size());
    for (unsigned char c : word) {
        const int id = byte_id_[c];
        if (id < 0) throw IndexError("byte 0x" + std::to_string(static_cast<int>(c)) + " is not in the vocabulary");
        sym.push_back(id);
    }
    while (sym.size() > 1) {
        int best_rank = -1, best_id = -1;
        std::pair<int, int> best_pair;
        for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
            auto it = merge_index_.find({sym[i], sym[i + 1]});
            if (it != merge_index_.end() && (best_rank < 0 || it->second.first < best_rank)) {
                best_rank = it->second.first;
                best_id = it->second.second;
                best_pair = it->first;
            }
        }
        if (best_rank < 0) break;
        std::vector<int> next;
        next.reserve(sym.size());
        for (std::size_t i = 0; i < sym.size(); ++i) {
            if (i + 1 < sym.size() && sym[i] == best_pair.first && sym[i + 1] == best_pair.second) {
                next.push_back(best_id);
                ++i;
            } else {
                next.push_back(sym[i]);
            }
        }
        sym.swap(next);
    }
    out.insert(out.end(), sym.begin(), sym.end());
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(normalize_text(text))) encode_word(w, ids);
    return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        const std::string& tok = token(id);
        if (!is_special(id)) out += tok;
    }
    // A leading space appears when the first emitted token is word-initial.
    if (!out.empty() && out.front() == ' ') out.erase(0, 1);
    return out;
}

std::string Vocab::serialize() const {
    std::ostringstream os;
    for (const auto& t : tokens_) os << escape_token(t) << '\n';
    os << "#merges\n";
    for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
    return os.str();
}

Vocab Vocab::parse(std::string_view text) {
    Vocab v;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    bool in_merges = false;
    while (std::getline(is, line)) {
        ++line_no;
        if (!in_merges && line == "#merges") {
            in_merges = true;
            continue;
        }
        if (!in_merges) {
            v.tokens_.push_back(unescape_token(line, line_no));
            continue;
        }
        if (line.empty()) continue;
        std::istringstream ls(line);
        int l = -1, r = -1;
        if (!(ls >> l >> r)) throw ValidationError("bad merge rule on vocab line " + std::to_string(line_no));
        v.merges_.emplace_back(l, r);
    }
    if (!in_merges) throw ValidationError("vocab file has no merge section");
    if (v.tokens_.size() < special::kCount) throw ValidationError("vocab file is missing special tokens");
    for (int i = 0; i < special::kCount; ++i) {
        if (v.tokens_[static_cast<std::size_t>(i)] != kSpecialNames[static_cast<std::size_t>(i)])
            throw ValidationError("vocab special token " + std::to_string(i) + " is not " +
                                  kSpecialNames[static_cast<std::size_t>(i)]);
    }
    const std::size_t first_merged = v.tokens_.size() - v.merges_.size();
    for (std::size_t r = 0; r < v.merges_.size(); ++r) {
        const auto [l, rr] = v.merges_[r];
        const auto merged = first_merged + r;
        if (l < special::kCount || rr < special::kCount || static_cast<std::size_t>(l) >= merged ||
            static_cast<std::size_t>(rr) >= merged || v.tokens_[static_cast<std::size_t>(l)] +
                                                              v.tokens_[static_cast<std::size_t>(rr)] !=
                                                          v.tokens_[merged])
            throw ValidationError("merge rule " + std::to_string(r) + " is inconsistent with the token list");
    }
    v.rebuild_index();
    return v;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write vocab " + path.string());
    os << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read vocab " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::string Vocab::fingerprint() const { return fnv1a_hex(serialize()); }

Vocab train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size) {
    std::map<std::string, long> word_freq;
    std::array<bool, 256> seen{};
    for (const auto& text : corpus) {
        for (auto& w : split_words(normalize_text(text))) {
            for (unsigned char c : w) seen[c] = true;
            ++word_freq[w];
        }
    }
    if (word_freq.empty()) throw ConfigError("train_bpe: corpus is empty");
    const auto base = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
    if (target_vocab_size <= base + special::kCount)
        throw ConfigError("vocab_size " + std::to_string(target_vocab_size) + " must exceed " +
                          std::to_string(base + special::kCount) + " (specials + base bytes)");

    Vocab v;
    v.tokens_.assign(kSpecialNames.begin(), kSpecialNames.end());
    for (int b = 0; b < 256; ++b)
        if (seen[static_cast<std::size_t>(b)]) v.tokens_.emplace_back(1, static_cast<char>(b));
    v.rebuild_index();

    std::vector<std::pair<std::vector<int>, long>> words;
    for (const auto& [w, f] : word_freq) {
        std::vector<int> sym;
        for (unsigned char c : w) sym.push_back(v.byte_id_[c]);
        words.emplace_back(std::move(sym), f);
    }

    while (v.tokens_.size() < target_vocab_size) {
        std::map<std::pair<int, int>, long> counts;
        for (const auto& [sym, f] : words)
            for (std::size_t i = 0; i + 1 < sym.size(); ++i) counts[{sym[i], sym[i + 1]}] += f;
        if (counts.empty()) break;
        // Highest count wins; ties go to the lexicographically smallest token pair.
        auto best = counts.begin();
        for (auto it = counts.begin(); it != counts.end(); ++it) {
            const auto key = [&](const auto& e) {
                return std::make_tuple(-e.second, v.tokens_[static_cast<std::size_t>(e.first.first)],
                                       v.tokens_[static_cast<std::size_t>(e.first.second)]);
            };
            if (key(*it) < key(*best)) best = it;
        }
        const auto pair = best->first;
        const int merged = static_cast<int>(v.tokens_.size());
        v.tokens_.push_back(v.tokens_[static_cast<std::size_t>(pair.first)] +
                            v.tokens_[static_cast<std::size_t>(pair.second)]);
        v.merges_.push_back(pair);
        for (auto& [sym, f] : words) {
            std::vector<int> next;
            next.reserve(sym.size());
            for (std::size_t i = 0; i < sym.size(); ++i) {
                if (i + 1 < sym.size() && sym[i] == pair.first && sym[i + 1] == pair.second) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(sym[i]);
                }
            }
            sym.swap(next);
        }
    }
    v.rebuild_index();
    return v;
}

}  // namespace latdial
