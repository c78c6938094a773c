//! Copy task: the first half of the sequence is a visible random prompt,
//! the second half repeats it and is what the model learns to produce.

use rand::Rng;

use super::TaskError;

/// Returns (tokens, clean mask): `length / 2` random tokens marked clean,
/// followed by an exact repeat that carries the loss.
pub fn copy_task<R: Rng + ?Sized>(
    length: usize,
    vocab: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>), TaskError> {
    if length == 0 || length % 2 != 0 {
        return Err(TaskError::ParameterOutOfRange { name: "length", value: length as f64 });
    }
    if vocab == 0 {
        return Err(TaskError::ParameterOutOfRange { name: "vocab", value: 0.0 });
    }
    let half = length / 2;
    let mut tokens: Vec<usize> = (0..half).map(|_| rng.gen_range(0..vocab)).collect();
    tokens.extend_from_within(..);
    let mut clean = vec![true; half];
    clean.extend(std::iter::repeat(false).take(half));
    Ok((tokens, clean))
}
