#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/composition.hpp"

namespace composer {

enum class Role { prompt, A, B, gamma };

enum class FirstTokenRule {
    first_to_first,  // block-first tokens form a hub set among themselves
    first_to_all     // block-first tokens attend every component token
};

struct TokenInfo {
    int block = 0;   // 0 = prompt block, then one block per target
    int offset = 0;  // position within the block; 0 marks the block's first token
    Role role = Role::prompt;
};

// Token ordering of the meta-generator input: m prompt tokens, then per
// adaptation target a component block of r A-tokens followed by r B-tokens
// (plus one gamma token in quant mode).
struct SequenceLayout {
    int m = 1;
    int r = 8;
    bool quant = false;
    std::vector<TargetKey> targets;
    std::vector<TokenInfo> tokens;

    static SequenceLayout build(int m, int r, std::vector<TargetKey> targets, bool quant) {
        if (m < 1 || r < 1 || targets.empty()) {
            throw std::runtime_error("layout: need m >= 1, r >= 1 and at least one target");
        }
        SequenceLayout lay;
        lay.m = m;
        lay.r = r;
        lay.quant = quant;
        lay.targets = std::move(targets);
        for (int i = 0; i < m; ++i) lay.tokens.push_back({0, i, Role::prompt});
        for (std::size_t t = 0; t < lay.targets.size(); ++t) {
            const int block = static_cast<int>(t) + 1;
            int off = 0;
            for (int i = 0; i < r; ++i) lay.tokens.push_back({block, off++, Role::A});
            for (int i = 0; i < r; ++i) lay.tokens.push_back({block, off++, Role::B});
            if (quant) lay.tokens.push_back({block, off++, Role::gamma});
        }
        return lay;
    }

    int length() const { return static_cast<int>(tokens.size()); }
    int block_len() const { return 2 * r + (quant ? 1 : 0); }
    int num_blocks() const { return static_cast<int>(targets.size()) + 1; }

    // first row of component block b (1-based block id)
    int block_start(int b) const { return m + (b - 1) * block_len(); }
};

// Boolean mask over (query, key) pairs; true = attention allowed. Rules:
//  (i)   prompt -> prompt
//  (ii)  component -> prompt
//  (iii) component -> component within the same block
//  (iv)  block-first component tokens interconnect across component blocks
//        (first_to_first), or see all component tokens (first_to_all)
// Prompt rows are true exactly on prompt columns.
inline std::vector<std::uint8_t> build_mask(const SequenceLayout& lay,
                                            FirstTokenRule rule = FirstTokenRule::first_to_first) {
    const int n = lay.length();
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
    for (int q = 0; q < n; ++q) {
        const TokenInfo& tq = lay.tokens[static_cast<std::size_t>(q)];
        for (int k = 0; k < n; ++k) {
            const TokenInfo& tk = lay.tokens[static_cast<std::size_t>(k)];
            const bool q_prompt = tq.role == Role::prompt;
            const bool k_prompt = tk.role == Role::prompt;
            bool allow = false;
            if (q_prompt) {
                allow = k_prompt;  // (i)
            } else if (k_prompt) {
                allow = true;  // (ii)
            } else if (tq.block == tk.block) {
                allow = true;  // (iii)
            } else if (tq.offset == 0) {
                allow = rule == FirstTokenRule::first_to_all || tk.offset == 0;  // (iv)
            }
            if (allow) mask[static_cast<std::size_t>(q) * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)] = 1;
        }
    }
    for (int q = 0; q < n; ++q) {
        bool any = false;
        for (int k = 0; k < n; ++k) any = any || mask[static_cast<std::size_t>(q) * n + k];
        if (!any) throw std::runtime_error("layout: mask row " + std::to_string(q) + " is empty");
    }
    return mask;
}

}  // namespace composer
