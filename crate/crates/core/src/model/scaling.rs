use super::ModelError;

fn positive(op: &'static str, args: &[u64]) -> Result<(), ModelError> {
    if args.iter().any(|&a| a == 0) {
        return Err(ModelError::Config(format!("{op} arguments must be at least 1, got {args:?}")));
    }
    Ok(())
}

/// Parameters of an `l`-layer self-attention stack of width `h` with a
/// `d`-entry embedding table: `(12h² + 13h)·l + d·h`.
pub fn param_count(h: u64, l: u64, d: u64) -> Result<u64, ModelError> {
    positive("param_count", &[h, l, d])?;
    let of = || ModelError::Overflow("param_count");
    let per_layer = h.checked_mul(h).and_then(|h2| h2.checked_mul(12)).and_then(|a| a.checked_add(13 * h)).ok_or_else(of)?;
    per_layer.checked_mul(l).and_then(|a| a.checked_add(d.checked_mul(h)?)).ok_or_else(of)
}

/// Forward FLOPs for batch `b`, sequence length `s`:
/// `(24·b·s·h² + 4·b·s²·h)·l + 2·b·s·h·d`.
pub fn flops_count(b: u64, s: u64, h: u64, l: u64, d: u64) -> Result<u64, ModelError> {
    positive("flops_count", &[b, s, h, l, d])?;
    let prod = |xs: &[u64]| xs.iter().try_fold(1u128, |acc, &x| acc.checked_mul(x as u128));
    let v = (|| {
        let attn = prod(&[24, b, s, h, h])?.checked_add(prod(&[4, b, s, s, h])?)?;
        attn.checked_mul(l as u128)?.checked_add(prod(&[2, b, s, h, d])?)
    })();
    v.and_then(|v| u64::try_from(v).ok()).ok_or(ModelError::Overflow("flops_count"))
}
