//! Pool-adjacent-violators projection onto monotone sequences.

/// Euclidean projection of `values` onto the set of non-increasing
/// sequences, in place.
pub fn project_non_increasing(values: &mut [f64]) {
    // Blocks of (mean, count), merged while a later block exceeds an earlier one.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values.iter() {
        let mut mean = v;
        let mut count = 1usize;
        while let Some(&(prev_mean, prev_count)) = blocks.last() {
            if prev_mean >= mean {
                break;
            }
            blocks.pop();
            let total = prev_count + count;
            mean = (prev_mean * prev_count as f64 + mean * count as f64) / total as f64;
            count = total;
        }
        blocks.push((mean, count));
    }
    let mut i = 0;
    for (mean, count) in blocks {
        values[i..i + count].fill(mean);
        i += count;
    }
}
