//! Desikan-Killiany region names for the positional `roi_001..roi_068`
//! columns: 34 left-hemisphere regions followed by the same 34 on the right.

use std::path::Path;

use crate::error::Result;
use crate::N_ROI;

const REGIONS: [&str; 34] = [
    "bankssts",
    "caudalanteriorcingulate",
    "caudalmiddlefrontal",
    "cuneus",
    "entorhinal",
    "fusiform",
    "inferiorparietal",
    "inferiortemporal",
    "isthmuscingulate",
    "lateraloccipital",
    "lateralorbitofrontal",
    "lingual",
    "medialorbitofrontal",
    "middletemporal",
    "parahippocampal",
    "paracentral",
    "parsopercularis",
    "parsorbitalis",
    "parstriangularis",
    "pericalcarine",
    "postcentral",
    "posteriorcingulate",
    "precentral",
    "precuneus",
    "rostralanteriorcingulate",
    "rostralmiddlefrontal",
    "superiorfrontal",
    "superiorparietal",
    "superiortemporal",
    "supramarginal",
    "frontalpole",
    "temporalpole",
    "transversetemporal",
    "insula",
];

const TEMPORAL: [&str; 9] = [
    "bankssts",
    "entorhinal",
    "fusiform",
    "inferiortemporal",
    "middletemporal",
    "parahippocampal",
    "superiortemporal",
    "temporalpole",
    "transversetemporal",
];

/// `lh_<region>` / `rh_<region>` for all 68 positions.
pub fn roi_names() -> Vec<String> {
    ["lh", "rh"]
        .iter()
        .flat_map(|h| REGIONS.iter().map(move |r| format!("{h}_{r}")))
        .collect()
}

pub fn column_name(roi: usize) -> String {
    format!("roi_{:03}", roi + 1)
}

/// Whether position `roi` is a temporal-lobe region.
pub fn is_temporal(roi: usize) -> bool {
    TEMPORAL.contains(&REGIONS[roi % REGIONS.len()])
}

/// Positions of the left and right para-hippocampal regions.
pub fn parahippocampal() -> (usize, usize) {
    let i = REGIONS.iter().position(|&r| r == "parahippocampal").unwrap();
    (i, i + REGIONS.len())
}

/// Writes the `roi_names.json` sidecar.
pub fn write_roi_names(path: &Path) -> Result<()> {
    let names = roi_names();
    debug_assert_eq!(names.len(), N_ROI);
    std::fs::write(path, serde_json::to_string_pretty(&names)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_eight_unique_names() {
        let names = roi_names();
        assert_eq!(names.len(), N_ROI);
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), N_ROI);
        let (l, r) = parahippocampal();
        assert_eq!(names[l], "lh_parahippocampal");
        assert_eq!(names[r], "rh_parahippocampal");
        assert_eq!((0..N_ROI).filter(|&i| is_temporal(i)).count(), 18);
        assert_eq!(column_name(67), "roi_068");
    }
}
