// SPDX-License-Identifier: Apache-2.0
//
// Word-level vocabulary over the annotation grammar, multimodal sequence
// assembly ([occ | global | ego | prompt | answer]) and a small pre-norm
// causal transformer with greedy decoding. Hidden states at occupancy
// positions feed the forecaster; hidden states at generated positions feed
// the planner.
#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "soq/nn.hpp"
#include "soq/optim.hpp"
#include "soq/scene.hpp"

namespace soq {

class Vocabulary {
  public:
    static constexpr int kBos = 0, kEos = 1, kPad = 2, kSep = 3;
    static constexpr int kSize = 256;

    static Vocabulary standard() {
        Vocabulary v;
        v.add("<bos>");
        v.add("<eos>");
        v.add("<pad>");
        v.add("<sep>");
        const char* words[] = {"describe", "the",     "scene",  "there", "are",    "vehicles",
                               "traffic",  "light",   "is",     "red",   "green",  "a",
                               "pedestrian", "ahead", "yes",    "no",    "command", "left",
                               "straight", "right",   "speed",  "slow",  "medium", "fast",
                               "anchor",   "and",     "stop",   "of",    "in"};
        for (const char* w : words) v.add(w);
        for (int i = 0; i <= 30; ++i) v.add(std::to_string(i));
        int filler = 0;
        while (v.size() < kSize) v.add("<unused" + std::to_string(filler++) + ">");
        return v;
    }

    int add(const std::string& word) {
        SOQ_REQUIRE(ids_.find(word) == ids_.end(), "Vocabulary: duplicate word " + word);
        const int id = static_cast<int>(words_.size());
        words_.push_back(word);
        ids_[word] = id;
        return id;
    }

    int size() const { return static_cast<int>(words_.size()); }

    int id(const std::string& word) const {
        auto it = ids_.find(word);
        SOQ_REQUIRE(it != ids_.end(), "Vocabulary: unknown word '" + word + "'");
        return it->second;
    }

    const std::string& word(int id) const {
        SOQ_REQUIRE(id >= 0 && id < size(), "Vocabulary: id out of range");
        return words_[static_cast<size_t>(id)];
    }

    std::vector<int64_t> encode(const std::string& text) const {
        std::vector<int64_t> out;
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) out.push_back(id(w));
        return out;
    }

    std::string decode(const std::vector<int64_t>& ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += word(static_cast<int>(ids[i]));
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("Vocabulary: cannot write " + path);
        for (const auto& w : words_) os << w << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw DataError("Vocabulary: cannot read " + path);
        Vocabulary v;
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) v.add(line);
        return v;
    }

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------

enum class Segment : int { Occ = 0, Global = 1, Ego = 2, Prompt = 3, Answer = 4 };

struct TokenSequence {
    ad::Var embeddings;                    // [T, d_lm] before positional terms
    std::vector<Segment> segments;         // per position
    std::vector<int64_t> text_ids;         // -1 at non-text positions
    std::vector<int64_t> loss_positions;   // logit rows that predict answer tokens
    std::vector<int64_t> loss_targets;     // the predicted answer ids (incl. EOS)
    int64_t occ_count = 0, global_count = 0;

    int64_t length() const { return static_cast<int64_t>(segments.size()); }
};

struct LmConfig {
    int d_lm = 128;
    int layers = 4;
    int heads = 4;
    int vocab = Vocabulary::kSize;
    int max_len = 192;
    int ffn_hidden = 256;
    bool bidirectional_prefix = false;  // ablation: perception prefix attends freely

    void validate() const {
        if (d_lm <= 0 || layers <= 0 || heads <= 0 || d_lm % heads != 0)
            throw ConfigError("LmConfig: transformer shape");
        if (max_len < 8) throw ConfigError("LmConfig: max_len too small");
    }
};

struct LmOutput {
    ad::Var logits;  // [T, vocab]
    ad::Var hidden;  // [T, d_lm] final-norm hidden states
};

struct GenerationResult {
    std::vector<int64_t> ids;   // generated answer ids, EOS stripped
    ad::Var reasoning_hidden;   // [n_generated, d_lm] hidden at generated steps
};

class LanguageModel {
  public:
    LanguageModel() = default;
    LanguageModel(nn::ParamStore& ps, const std::string& name, const LmConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        tok_embed_ = ps.normal_param(name + ".tok_embed", {cfg.vocab, cfg.d_lm}, 0.02);
        pos_embed_ = ps.normal_param(name + ".pos_embed", {cfg.max_len, cfg.d_lm}, 0.02);
        seg_embed_ = ps.normal_param(name + ".seg_embed", {5, cfg.d_lm}, 0.02);
        ego_proj_ = nn::Linear(ps, name + ".ego_proj", 8, cfg.d_lm);
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string ln = name + ".block" + std::to_string(l);
            blocks_.push_back(Block{
                nn::LayerNorm(ps, ln + ".norm1", cfg.d_lm),
                nn::MultiheadAttention(ps, ln + ".attn", cfg.d_lm, cfg.heads),
                nn::LayerNorm(ps, ln + ".norm2", cfg.d_lm),
                nn::Mlp(ps, ln + ".mlp", cfg.d_lm, cfg.ffn_hidden, cfg.d_lm),
            });
        }
        final_norm_ = nn::LayerNorm(ps, name + ".final_norm", cfg.d_lm);
        lm_head_ = nn::Linear(ps, name + ".lm_head", cfg.d_lm, cfg.vocab);
    }

    const LmConfig& config() const { return cfg_; }

    ad::Var ego_token(const EgoState& ego) const {
        const auto f = ego.features();
        return ego_proj_(ad::constant({1, 8}, std::vector<double>(f.begin(), f.end())));
    }

    // occ/global may be null (ablations); answer may be empty (generation mode)
    TokenSequence assemble_sequence(const ad::Var& occ_tokens, const ad::Var& global_tokens,
                                    const EgoState& ego, const std::vector<int64_t>& prompt_ids,
                                    const std::vector<int64_t>& answer_ids) const {
        TokenSequence seq;
        std::vector<ad::Var> parts;
        if (occ_tokens) {
            parts.push_back(occ_tokens);
            seq.occ_count = occ_tokens->rows();
            for (int64_t i = 0; i < occ_tokens->rows(); ++i) {
                seq.segments.push_back(Segment::Occ);
                seq.text_ids.push_back(-1);
            }
        }
        if (global_tokens) {
            parts.push_back(global_tokens);
            seq.global_count = global_tokens->rows();
            for (int64_t i = 0; i < global_tokens->rows(); ++i) {
                seq.segments.push_back(Segment::Global);
                seq.text_ids.push_back(-1);
            }
        }
        parts.push_back(ego_token(ego));
        seq.segments.push_back(Segment::Ego);
        seq.text_ids.push_back(-1);

        std::vector<int64_t> prompt = {Vocabulary::kBos};
        prompt.insert(prompt.end(), prompt_ids.begin(), prompt_ids.end());
        parts.push_back(ad::gather_rows(tok_embed_, prompt));
        for (int64_t id : prompt) {
            seq.segments.push_back(Segment::Prompt);
            seq.text_ids.push_back(id);
        }

        if (!answer_ids.empty()) {
            // teacher forcing: answer tokens are inputs; every answer token and
            // the closing EOS are predicted from the preceding position
            parts.push_back(ad::gather_rows(tok_embed_, answer_ids));
            const int64_t first_answer_pos = seq.length();
            for (int64_t id : answer_ids) {
                seq.segments.push_back(Segment::Answer);
                seq.text_ids.push_back(id);
            }
            for (size_t k = 0; k < answer_ids.size(); ++k) {
                seq.loss_positions.push_back(first_answer_pos - 1 + static_cast<int64_t>(k));
                seq.loss_targets.push_back(answer_ids[k]);
            }
            seq.loss_positions.push_back(seq.length() - 1);
            seq.loss_targets.push_back(Vocabulary::kEos);
        }

        if (seq.length() > cfg_.max_len)
            throw InvalidArgument("assemble_sequence: sequence exceeds max length");
        seq.embeddings = ad::concat_rows(parts);
        return seq;
    }

    LmOutput forward(const TokenSequence& seq) const {
        const int64_t T = seq.length();
        // positional + segment embeddings
        std::vector<int64_t> pos_ids(static_cast<size_t>(T)), seg_ids(static_cast<size_t>(T));
        for (int64_t i = 0; i < T; ++i) {
            pos_ids[i] = i;
            seg_ids[i] = static_cast<int64_t>(seq.segments[i]);
        }
        ad::Var x = ad::add(seq.embeddings, ad::add(ad::gather_rows(pos_embed_, pos_ids),
                                                    ad::gather_rows(seg_embed_, seg_ids)));
        const auto mask = attention_mask(seq);
        for (const auto& b : blocks_) {
            x = ad::add(x, b.attn(b.norm1(x), b.norm1(x), mask));
            x = ad::add(x, b.mlp(b.norm2(x)));
        }
        auto hidden = final_norm_(x);
        return {lm_head_(hidden), hidden};
    }

    // token-level cross entropy averaged over answer positions only
    ad::Var lm_loss(const ad::Var& logits, const TokenSequence& seq) const {
        if (seq.loss_positions.empty())
            throw InvalidArgument("lm_loss: sequence has no answer positions");
        return ad::cross_entropy_rows(logits, seq.loss_targets, seq.loss_positions);
    }

    GenerationResult generate(const ad::Var& occ_tokens, const ad::Var& global_tokens,
                              const EgoState& ego, const std::vector<int64_t>& prompt_ids,
                              int max_new) const {
        GenerationResult res;
        std::vector<int64_t> answer;
        std::vector<ad::Var> hidden_rows;
        for (int step = 0; step < max_new; ++step) {
            auto seq = assemble_sequence(occ_tokens, global_tokens, ego, prompt_ids, answer);
            auto out = forward(seq);
            const int64_t last = seq.length() - 1;
            hidden_rows.push_back(ad::slice_rows(out.hidden, last, last + 1));
            const int64_t V = out.logits->cols();
            const double* row = &out.logits->val[last * V];
            int64_t best = 0;
            for (int64_t vtok = 1; vtok < V; ++vtok)
                if (row[vtok] > row[best]) best = vtok;
            if (best == Vocabulary::kEos) break;
            answer.push_back(best);
            if (seq.length() + 1 >= cfg_.max_len) break;
        }
        res.ids = answer;
        res.reasoning_hidden = hidden_rows.empty()
                                   ? ad::zeros({1, cfg_.d_lm})
                                   : ad::concat_rows(hidden_rows);
        return res;
    }

    // causal everywhere; optionally bidirectional across the perception prefix
    std::vector<uint8_t> attention_mask(const TokenSequence& seq) const {
        const int64_t T = seq.length();
        std::vector<uint8_t> mask(static_cast<size_t>(T * T), 0);
        int64_t prefix = 0;
        for (int64_t i = 0; i < T; ++i)
            if (seq.segments[i] == Segment::Occ || seq.segments[i] == Segment::Global ||
                seq.segments[i] == Segment::Ego)
                prefix = i + 1;
        for (int64_t i = 0; i < T; ++i)
            for (int64_t j = 0; j <= i; ++j) mask[i * T + j] = 1;
        if (cfg_.bidirectional_prefix)
            for (int64_t i = 0; i < prefix; ++i)
                for (int64_t j = 0; j < prefix; ++j) mask[i * T + j] = 1;
        return mask;
    }

    ad::Var tok_embed_, pos_embed_, seg_embed_;
    nn::Linear ego_proj_, lm_head_;
    nn::LayerNorm final_norm_;

  private:
    struct Block {
        nn::LayerNorm norm1;
        nn::MultiheadAttention attn;
        nn::LayerNorm norm2;
        nn::Mlp mlp;
    };

    LmConfig cfg_;
    std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// text metrics over whitespace tokens

inline bool exact_match(const std::string& pred, const std::string& ref) { return pred == ref; }

inline double token_f1(const std::string& pred, const std::string& ref) {
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::istringstream ss(s);
        std::string w;
        while (ss >> w) out.push_back(w);
        return out;
    };
    auto p = split(pred), r = split(ref);
    if (p.empty() && r.empty()) return 1.0;
    if (p.empty() || r.empty()) return 0.0;
    std::unordered_map<std::string, int> counts;
    for (const auto& w : r) ++counts[w];
    int overlap = 0;
    for (const auto& w : p) {
        auto it = counts.find(w);
        if (it != counts.end() && it->second > 0) {
            ++overlap;
            --it->second;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / p.size();
    const double recall = static_cast<double>(overlap) / r.size();
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace soq
