//! Online template ensemble: an ordered, bounded history of template
//! features, their Gaussian masks and the target box each one was cut at.

use crate::error::{Error, Result};
use crate::geometry::CellBox;
use crate::tensor::{FeatureMap, MaskVector};

pub const DEFAULT_MAX_SIZE: usize = 20;
pub const DEFAULT_INTERVAL: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateEnsemble {
    templates: Vec<FeatureMap>,
    masks: Vec<MaskVector>,
    targets: Vec<CellBox>,
    max_size: usize,
    interval: usize,
    pin_first: bool,
    frames_since_update: usize,
}

impl TemplateEnsemble {
    pub fn init(
        first_template: FeatureMap,
        first_mask: MaskVector,
        first_target: CellBox,
        max_size: usize,
        interval: usize,
    ) -> Result<Self> {
        if max_size == 0 || interval == 0 {
            return Err(Error::param(format!(
                "ensemble needs max_size >= 1 and interval >= 1, got {max_size} and {interval}"
            )));
        }
        check_entry(&first_template, &first_mask, &first_target)?;
        Ok(TemplateEnsemble {
            templates: vec![first_template],
            masks: vec![first_mask],
            targets: vec![first_target],
            max_size,
            interval,
            pin_first: false,
            frames_since_update: 0,
        })
    }

    /// Keep the initial template when evicting (evict the second-oldest).
    pub fn with_pinned_first(mut self, pin: bool) -> Self {
        self.pin_first = pin;
        self
    }

    /// Adds the template when `frame_index` falls on the sampling interval,
    /// evicting the oldest entry at capacity. Returns whether it updated.
    pub fn maybe_update(
        &mut self,
        template: FeatureMap,
        mask: MaskVector,
        target: CellBox,
        frame_index: usize,
    ) -> Result<bool> {
        if !template.same_shape(&self.templates[0]) {
            return Err(Error::dim(format!(
                "template {}x{}x{} does not match ensemble {}x{}x{}",
                template.channels(),
                template.height(),
                template.width(),
                self.templates[0].channels(),
                self.templates[0].height(),
                self.templates[0].width()
            )));
        }
        check_entry(&template, &mask, &target)?;
        if frame_index == 0 || !frame_index.is_multiple_of(self.interval) {
            self.frames_since_update += 1;
            return Ok(false);
        }
        if self.templates.len() == self.max_size {
            let victim = if self.pin_first && self.max_size > 1 {
                1
            } else {
                0
            };
            self.templates.remove(victim);
            self.masks.remove(victim);
            self.targets.remove(victim);
        }
        self.templates.push(template);
        self.masks.push(mask);
        self.targets.push(target);
        self.frames_since_update = 0;
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[FeatureMap] {
        &self.templates
    }

    pub fn masks(&self) -> &[MaskVector] {
        &self.masks
    }

    pub fn targets(&self) -> &[CellBox] {
        &self.targets
    }

    pub fn latest_target(&self) -> CellBox {
        *self.targets.last().expect("ensemble is never empty")
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn frames_since_update(&self) -> usize {
        self.frames_since_update
    }

    /// All masks flattened template by template, aligned with the rows of
    /// the concatenated template embeddings.
    pub fn concat_masks(&self) -> Result<MaskVector> {
        MaskVector::concat(&self.masks)
    }
}

fn check_entry(template: &FeatureMap, mask: &MaskVector, target: &CellBox) -> Result<()> {
    if mask.len() != template.spatial_len() {
        return Err(Error::dim(format!(
            "mask of length {} for a {}x{} template",
            mask.len(),
            template.height(),
            template.width()
        )));
    }
    if !target.fits(template.height(), template.width()) {
        return Err(Error::OutOfBounds(format!(
            "target box {target:?} outside {}x{} template",
            template.height(),
            template.width()
        )));
    }
    Ok(())
}
