use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled grayscale image, shape `[1, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
}

/// Number of samples per class; errors if any label is out of range.
pub fn class_counts(samples: &[Sample], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = alloc::vec![0; num_classes];
    for s in samples {
        match counts.get_mut(s.label) {
            Some(c) => *c += 1,
            None => {
                return Err(Error::Data(alloc::format!(
                    "sample `{}` has label {} but only {num_classes} classes exist",
                    s.id,
                    s.label
                )))
            }
        }
    }
    Ok(counts)
}

/// Errors naming the first class without samples.
pub fn require_all_classes(samples: &[Sample], num_classes: usize) -> Result<()> {
    let counts = class_counts(samples, num_classes)?;
    match counts.iter().position(|&c| c == 0) {
        Some(class) => Err(Error::Data(alloc::format!("class {class} has no samples"))),
        None => Ok(()),
    }
}
