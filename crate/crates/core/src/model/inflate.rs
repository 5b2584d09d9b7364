//! 2D → 3D weight inflation for initializing from image-pretrained
//! networks.

use std::collections::{BTreeSet, HashMap};

use super::Model;
use crate::error::{Error, Result};
use crate::layers::{Layer, Slot};
use crate::tensor::{Scalar, Tensor};

/// Tensors that must be present in any non-empty interchange set.
const MANDATORY: &[&str] = &["stem.conv.weight"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InflationReport {
    /// Model tensors filled from the 2D set.
    pub matched: Vec<String>,
    /// Model tensors left at their current (random) values.
    pub unmatched: Vec<String>,
    /// 2D tensors with no counterpart in the model.
    pub unused: Vec<String>,
}

/// Replicates a `[Cout, Cin, kH, kW]` kernel `kt` times along a new
/// temporal axis and divides by `kt`, so a temporally constant input gets
/// the same per-frame response as the 2D kernel.
pub fn inflate_kernel<T: Scalar>(w2d: &Tensor<T>, kt: usize) -> Result<Tensor<T>> {
    let [cout, cin, kh, kw] = *w2d.dims() else {
        return Err(Error::Shape(format!(
            "2D kernel must be [Cout, Cin, kH, kW], got {:?}",
            w2d.dims()
        )));
    };
    if kt == 0 {
        return Err(Error::Shape("temporal kernel extent must be positive".into()));
    }
    let plane = kh * kw;
    let scale = T::of(1.0 / kt as f64);
    let mut data = Vec::with_capacity(w2d.len() * kt);
    for filter in w2d.data().chunks(plane) {
        for _ in 0..kt {
            data.extend(filter.iter().map(|&v| v * scale));
        }
    }
    Tensor::new(vec![cout, cin, kt, kh, kw], data)
}

/// Copies 2D pretrained weights into `model`, inflating rank-4 conv kernels
/// to the model's rank-5 kernels and copying everything else verbatim.
pub fn inflate_2d<T: Scalar>(
    model: &mut Model<T>,
    weights2d: &[(String, Tensor<f32>)],
) -> Result<InflationReport> {
    let lookup: HashMap<&str, &Tensor<f32>> =
        weights2d.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if !weights2d.is_empty() {
        if let Some(missing) = MANDATORY.iter().find(|n| !lookup.contains_key(*n)) {
            return Err(Error::Malformed(format!(
                "interchange weights lack mandatory tensor `{missing}`"
            )));
        }
    }

    // Validate every match before touching the model.
    let mut plan: Vec<(String, Tensor<T>)> = Vec::new();
    let mut report = InflationReport::default();
    let mut seen = BTreeSet::new();
    for (name, dims, _) in model.tensor_shapes() {
        let Some(src) = lookup.get(name.as_str()) else {
            report.unmatched.push(name);
            continue;
        };
        seen.insert(name.clone());
        let mismatch = || Error::TensorShapeMismatch {
            name: name.clone(),
            found: src.dims().to_vec(),
            expected: dims.clone(),
        };
        let value = if dims.len() == 5 && src.rank() == 4 {
            let [cout, cin, kt, kh, kw] = dims[..] else { unreachable!() };
            if src.dims() != [cout, cin, kh, kw] {
                return Err(mismatch());
            }
            inflate_kernel(&src.cast::<T>(), kt)?
        } else if src.dims() == dims.as_slice() {
            src.cast::<T>()
        } else {
            return Err(mismatch());
        };
        report.matched.push(name.clone());
        plan.push((name, value));
    }
    report.unused = weights2d
        .iter()
        .filter(|(n, _)| !seen.contains(n))
        .map(|(n, _)| n.clone())
        .collect();

    let values: HashMap<String, Tensor<T>> = plan.into_iter().collect();
    model.visit("", &mut |name, slot| {
        if let Some(v) = values.get(name) {
            let dst = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            dst.data_mut().copy_from_slice(v.data());
        }
    });
    Ok(report)
}
