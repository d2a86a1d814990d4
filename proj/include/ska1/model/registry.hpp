#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include "ska1/core/autograd.hpp"
#include "ska1/core/errors.hpp"

namespace ska1 {

// Every learnable tensor in the system lives in exactly one named group; the
// staged trainer freezes/unfreezes whole groups and checkpoints walk this
// registry in registration order.

inline const std::array<std::string, 7>& registry_group_names() {
    static const std::array<std::string, 7> names{
        "vae_stub", "landmark_guider", "patch_embed_conv", "dit_blocks",
        "identity_projection", "text_stub", "output_head"};
    return names;
}

struct Param {
    std::string group;
    std::string name;
    ag::Var var;

    std::string key() const { return group + "/" + name; }
};

class ParameterRegistry {
public:
    ag::Var add(const std::string& group, const std::string& name, Tensor init) {
        require_known_group(group);
        for (const auto& p : params_)
            if (p.group == group && p.name == name)
                throw ConfigError("duplicate parameter: " + group + "/" + name);
        auto node = std::make_shared<ag::Node>();
        node->val = std::move(init);
        node->requires_grad = false;
        params_.push_back(Param{group, name, node});
        return params_.back().var;
    }

    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }

    Param& at(const std::string& group, const std::string& name) {
        for (auto& p : params_)
            if (p.group == group && p.name == name) return p;
        throw ConfigError("unknown parameter: " + group + "/" + name);
    }

    // Marks exactly the given groups trainable; everything else is frozen.
    void set_trainable_groups(const std::set<std::string>& groups) {
        for (const auto& g : groups) require_known_group(g);
        for (auto& p : params_) {
            p.var->requires_grad = groups.count(p.group) > 0;
            if (!p.var->requires_grad) p.var->grad = Tensor();
        }
    }

    void freeze_all() { set_trainable_groups({}); }

    std::vector<Param*> trainable() {
        std::vector<Param*> out;
        for (auto& p : params_)
            if (p.var->requires_grad) out.push_back(&p);
        return out;
    }

    // Drops gradient storage; backward() re-allocates only for tensors a loss
    // actually reaches, letting the optimizer skip untouched parameters.
    void clear_grads() {
        for (auto& p : params_) p.var->grad = Tensor();
    }

    std::int64_t total_parameters() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.var->val.numel();
        return n;
    }

    static void require_known_group(const std::string& group) {
        for (const auto& g : registry_group_names())
            if (g == group) return;
        throw ConfigError("unknown parameter group: " + group);
    }

private:
    std::vector<Param> params_;
};

} // namespace ska1
