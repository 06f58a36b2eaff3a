use std::path::Path;

use ndarray::Array2;

use super::binary::{self, Dtype, Sidecar};
use crate::error::{MuseError, Result};

/// One slide: an `N x d` patch-feature matrix with its identity and label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBag {
    pub slide_id: String,
    pub features: Array2<f32>,
    pub label: usize,
}

impl PatchBag {
    pub fn new(slide_id: impl Into<String>, features: Array2<f32>, label: usize) -> Result<Self> {
        let bag = Self { slide_id: slide_id.into(), features, label };
        bag.validate()?;
        Ok(bag)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(MuseError::data(format!("bag {} has no patches", self.slide_id)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(MuseError::data(format!("bag {} has non-finite features", self.slide_id)));
        }
        Ok(())
    }

    /// Features widened to `f64` for model evaluation.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            slide_id: self.slide_id.clone(),
            n: self.n(),
            d: self.d(),
            label: self.label,
            dtype: Dtype::F32,
        }
    }
}

/// Reads a bag given its binary file and an already parsed sidecar.
pub fn read_feature_bag(path: &Path, sidecar: &Sidecar) -> Result<PatchBag> {
    let features = binary::read_f32(path, sidecar)?;
    let bag = PatchBag { slide_id: sidecar.slide_id.clone(), features, label: sidecar.label };
    if bag.n() == 0 {
        return Err(MuseError::format(path, "bag declares zero patches"));
    }
    Ok(bag)
}

/// Reads a bag and the sidecar that sits next to it.
pub fn load_feature_bag(path: &Path) -> Result<PatchBag> {
    let sidecar = binary::read_sidecar(&binary::sidecar_path(path))?;
    read_feature_bag(path, &sidecar)
}

/// Writes `path` and its `.json` sidecar; returns the sidecar.
pub fn write_feature_bag(bag: &PatchBag, path: &Path) -> Result<Sidecar> {
    bag.validate()?;
    let sidecar = bag.sidecar();
    binary::write_f32(path, &bag.features)?;
    binary::write_json(&binary::sidecar_path(path), &sidecar)?;
    Ok(sidecar)
}
