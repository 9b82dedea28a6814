//! Per-pixel label masks and image-level label sets.

use std::collections::BTreeSet;

use crate::error::{CianError, Result};

/// Label value for pixels that carry no supervision.
pub const IGNORE: u8 = 255;

/// Dense `H×W` label map with values in `0..=C` (0 is background) or
/// [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SeedMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SeedMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(CianError::invalid(format!(
                "mask {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(SeedMask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        SeedMask {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of non-IGNORE pixels.
    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Check every label is `< num_classes` or IGNORE.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && (l as usize) >= num_classes)
        {
            Some(&label) => Err(CianError::InvalidLabel { label, num_classes }),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        SeedMask {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Foreground classes present in the mask.
    pub fn foreground_classes(&self) -> ImageLabelSet {
        ImageLabelSet(
            self.labels
                .iter()
                .copied()
                .filter(|&l| l != 0 && l != IGNORE)
                .collect(),
        )
    }
}

/// Foreground classes (`1..=C`) present in an image. Background is implied.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageLabelSet(BTreeSet<u8>);

impl ImageLabelSet {
    pub fn new(classes: impl IntoIterator<Item = u8>) -> Self {
        ImageLabelSet(
            classes
                .into_iter()
                .filter(|&c| c != 0 && c != IGNORE)
                .collect(),
        )
    }

    pub fn contains(&self, class: u8) -> bool {
        self.0.contains(&class)
    }

    /// Whether a pixel may take `class`: background or a labeled class.
    pub fn admits(&self, class: u8) -> bool {
        class == 0 || self.0.contains(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersection(&self, other: &ImageLabelSet) -> ImageLabelSet {
        ImageLabelSet(self.0.intersection(&other.0).copied().collect())
    }

    /// Parse `"1,3"` (empty string gives the empty set).
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(ImageLabelSet::default());
        }
        text.split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<u8>()
                    .ok()
                    .filter(|&c| c != 0 && c != IGNORE)
                    .ok_or_else(|| CianError::format("label list", format!("bad class id {tok:?}")))
            })
            .collect::<Result<BTreeSet<u8>>>()
            .map(ImageLabelSet)
    }
}

impl std::fmt::Display for ImageLabelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromIterator<u8> for ImageLabelSet {
    fn from_iter<I: IntoIterator<Item = u8>>(iter: I) -> Self {
        ImageLabelSet::new(iter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_set_parse_and_display() {
        let s = ImageLabelSet::parse("3, 1").unwrap();
        assert_eq!(s.to_string(), "1,3");
        assert!(ImageLabelSet::parse("").unwrap().is_empty());
        assert!(ImageLabelSet::parse("0").is_err());
        assert!(ImageLabelSet::parse("x").is_err());
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let m = SeedMask::new(1, 3, vec![0, 4, IGNORE]).unwrap();
        assert!(m.validate(5).is_ok());
        assert!(matches!(
            m.validate(4),
            Err(CianError::InvalidLabel { label: 4, .. })
        ));
    }

    #[test]
    fn flip_twice_is_identity() {
        let m = SeedMask::new(2, 3, vec![0, 1, 2, 3, IGNORE, 1]).unwrap();
        assert_eq!(m.flip_horizontal().labels(), &[2, 1, 0, 1, IGNORE, 3]);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }

    #[test]
    fn admits_background_always() {
        let s = ImageLabelSet::new([2]);
        assert!(s.admits(0) && s.admits(2) && !s.admits(1));
    }
}
