use crate::tokenizer::ScaleSchedule;

/// `T x T` permission matrix, row-major: row `q` may attend to column `k`
/// iff `k`'s scale is not later than `q`'s.
pub fn block_causal_mask(schedule: &ScaleSchedule) -> Vec<bool> {
    let scale = schedule.scale_of_positions();
    let t = scale.len();
    let mut mask = vec![false; t * t];
    for q in 0..t {
        for k in 0..t {
            mask[q * t + k] = scale[k] <= scale[q];
        }
    }
    mask
}
