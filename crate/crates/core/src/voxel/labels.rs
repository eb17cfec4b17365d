use crate::error::{Error, Result};

pub type Label = u8;

/// Semantic classes of the nuScenes occupancy benchmark in report column order, followed by
/// the free class.
pub const NUSCENES_CLASS_NAMES: [&str; 18] = [
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "free",
];

/// Set of class names with one distinguished "free" (unoccupied) class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
    free_class: Label,
}

impl LabelSpace {
    pub fn new(names: Vec<String>, free_class: Label) -> Result<Self> {
        if names.is_empty() || names.len() > Label::MAX as usize + 1 {
            return Err(Error::Validation(format!(
                "label space needs 1..=256 classes, got {}",
                names.len()
            )));
        }
        if free_class as usize >= names.len() {
            return Err(Error::Validation(format!(
                "free class {free_class} not below num_classes {}",
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::Validation(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names, free_class })
    }

    /// The 18-class nuScenes label space, free = 17.
    pub fn nuscenes() -> Self {
        Self {
            names: NUSCENES_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            free_class: 17,
        }
    }

    /// Six-class subset used for fast experiments; free = 5 and "bicycle" is the rare class.
    pub fn reduced() -> Self {
        Self {
            names: ["barrier", "bicycle", "car", "driveable_surface", "vegetation", "free"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            free_class: 5,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn free_class(&self) -> Label {
        self.free_class
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: Label) -> &str {
        &self.names[label as usize]
    }

    pub fn find(&self, name: &str) -> Option<Label> {
        self.names.iter().position(|n| n == name).map(|i| i as Label)
    }

    pub fn check(&self, label: Label) -> Result<()> {
        if (label as usize) < self.num_classes() {
            Ok(())
        } else {
            Err(Error::Label {
                label: label as usize,
                num_classes: self.num_classes(),
            })
        }
    }

    /// Non-free labels in ascending order.
    pub fn semantic_labels(&self) -> impl Iterator<Item = Label> + '_ {
        (0..self.num_classes() as Label).filter(move |&l| l != self.free_class)
    }
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self::nuscenes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nuscenes_layout() {
        let ls = LabelSpace::nuscenes();
        assert_eq!(ls.num_classes(), 18);
        assert_eq!(ls.free_class(), 17);
        assert_eq!(ls.name(17), "free");
        assert_eq!(ls.find("car"), Some(4));
        assert_eq!(ls.semantic_labels().count(), 17);
    }

    #[test]
    fn rejects_bad_spaces() {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(LabelSpace::new(names(&["a", "b"]), 2).is_err());
        assert!(LabelSpace::new(names(&["a", "a"]), 1).is_err());
        assert!(LabelSpace::new(names(&["a", "free"]), 1).is_ok());
    }
}
