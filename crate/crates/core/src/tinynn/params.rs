/// Anything that owns trainable tensors.
///
/// Both visitors must walk the tensors in the same order; gradient containers
/// are values of the same type, so optimizers can zip the two walks.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn param_count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |_, _, data| n += data.len());
    n
}

pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |_, _, data| out.extend_from_slice(data));
    out
}

pub fn fill<P: Parameters + ?Sized>(p: &mut P, value: f64) {
    p.visit_mut(&mut |_, data| data.iter_mut().for_each(|v| *v = value));
}

/// Clone with every parameter set to zero, used as a gradient accumulator.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    fill(&mut z, 0.0);
    z
}

pub fn all_finite<P: Parameters + ?Sized>(p: &P) -> bool {
    let mut ok = true;
    p.visit(&mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
    ok
}

pub fn l2_norm<P: Parameters + ?Sized>(p: &P) -> f64 {
    let mut s = 0.0;
    p.visit(&mut |_, _, data| s += data.iter().map(|v| v * v).sum::<f64>());
    s.sqrt()
}

/// `dst += scale * src`, element-wise over matching tensors.
pub fn add_scaled<P: Parameters>(dst: &mut P, src: &P, scale: f64) {
    let flat = flatten(src);
    let mut off = 0;
    dst.visit_mut(&mut |_, data| {
        for v in data.iter_mut() {
            *v += scale * flat[off];
            off += 1;
        }
    });
}

/// Sets the i-th scalar parameter in visit order, returning the old value.
pub fn set_scalar<P: Parameters + ?Sized>(p: &mut P, index: usize, value: f64) -> f64 {
    let mut off = 0;
    let mut old = f64::NAN;
    p.visit_mut(&mut |_, data| {
        if index >= off && index < off + data.len() {
            old = data[index - off];
            data[index - off] = value;
        }
        off += data.len();
    });
    old
}

/// Name of the tensor holding the i-th scalar in visit order.
pub fn scalar_owner<P: Parameters + ?Sized>(p: &P, index: usize) -> String {
    let mut off = 0;
    let mut name = String::new();
    p.visit(&mut |n, _, data| {
        if index >= off && index < off + data.len() {
            name = format!("{n}[{}]", index - off);
        }
        off += data.len();
    });
    name
}
