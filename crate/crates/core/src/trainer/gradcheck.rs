//! Finite-difference check of the analytic gradient.

use crate::mlp::Mlp;

/// Shift biases so no hidden pre-activation lies within `margin` of the
/// ReLU kink for input `x`. Layers are fixed front to back because each
/// shift changes the inputs of the next layer.
pub fn nudge_off_kinks(net: &mut Mlp, x: &[f64], margin: f64) {
    let hidden = net.layers.len().saturating_sub(1);
    for k in 0..hidden {
        let t = net.trace(x).expect("input width matches");
        for (i, z) in t.pre[k].iter().enumerate() {
            if z.abs() < margin {
                let target = if *z >= 0.0 { margin } else { -margin };
                net.layers[k].b[i] += target - z;
            }
        }
    }
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter. The relative error of
/// one parameter is `|a - n| / max(|a| + |n|, floor)`.
pub fn gradient_check(net: &Mlp, x: &[f64], label: usize, h: f64, floor: f64) -> f64 {
    let (_, grad) = net.loss_and_grad(x, label, 1.0).expect("input width matches");
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for p in 0..net.param_count() {
        let orig = net.param(p);
        *probe.param_mut(p) = orig + h;
        let up = probe.loss_and_grad(x, label, 1.0).expect("dims").0;
        *probe.param_mut(p) = orig - h;
        let down = probe.loss_and_grad(x, label, 1.0).expect("dims").0;
        *probe.param_mut(p) = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.param(p);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}
