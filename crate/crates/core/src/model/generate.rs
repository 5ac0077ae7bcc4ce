use super::forward::forward;
use super::{ModelParams, Real};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer, EOS};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `BOS + encode(prompt)`. Stops at EOS, after
/// `max_new_tokens`, or when the context is full. Returns only the decoded
/// continuation, without the EOS.
pub fn greedy_generate<F: Real>(
    params: &ModelParams<F>,
    tok: &Tokenizer,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<String> {
    let ctx = params.config.context_len;
    let mut ids = tok.encode_with_bos(prompt);
    if ids.len() >= ctx {
        return Err(Error::Data(format!(
            "prompt of {} tokens leaves no room in context length {ctx}",
            ids.len()
        )));
    }
    let start = ids.len();
    while ids.len() - start < max_new_tokens && ids.len() < ctx {
        let logits = forward(params, &ids)?;
        let next = argmax(logits.row(ids.len() - 1)) as TokenId;
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    tok.decode(&ids[start..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 5]), 0);
    }
}
