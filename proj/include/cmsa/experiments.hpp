#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cmsa/trainer.hpp"

namespace cmsa {

/// Memorization recipe on the first `count` training images: no
/// augmentation or label smoothing, one batch per epoch, early stop above
/// 95% train accuracy.
RunConfig overfit_config(RunConfig base, int count);

/// "1,5" or "5,1,3" -> ablation row ids in ascending (table) order,
/// duplicates removed. ConfigError on ids outside 1..5.
std::vector<int> parse_rows(std::string_view text);

struct AblationResult {
    int row = 0;
    AblationFlags flags;
    std::int64_t params = 0;
    RunResult run;
};

/// Trains one model per row from the same seed, data order and augmentation
/// draws; only the attention ablation flags differ. Each row writes its
/// config.json, metrics and checkpoint into out_dir/row<r> when out_dir is
/// non-empty.
std::vector<AblationResult> run_ablation(const RunConfig& config, const Dataset& train, const Dataset& val,
                                         const std::vector<int>& rows, const std::string& out_dir,
                                         const std::function<void(int row, const EpochMetrics&)>& on_epoch = {});

inline constexpr const char* kAblationHeader =
    "row,standard_attn,grouped_attn,cascade,sf,cf,params,epochs,train_loss,train_acc,val_loss,val_acc";
std::string ablation_row(const AblationResult& r);

}  // namespace cmsa
