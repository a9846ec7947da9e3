use ndarray::Array2;

use super::augment::flip2;
use super::ImagePair;
use crate::network::{ChangeMap, ChangePredictor};
use crate::{Error, Result};

/// Identity, horizontal, vertical, both.
const VIEWS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// Flip test-time augmentation for a single pair.
pub fn tta_predict(pair: &ImagePair, model: &dyn ChangePredictor) -> Result<ChangeMap> {
    let mut maps = tta_predict_batch(std::slice::from_ref(pair), model)?;
    Ok(maps.remove(0))
}

/// Averages the predictions over the four flip views, undoing each flip
/// before averaging.
pub fn tta_predict_batch(pairs: &[ImagePair], model: &dyn ChangePredictor) -> Result<Vec<ChangeMap>> {
    let views: Vec<ImagePair> = pairs
        .iter()
        .flat_map(|p| VIEWS.iter().map(move |(h, v)| p.flipped(*h, *v)))
        .collect();
    let maps = model.predict(&views)?;
    if maps.len() != views.len() {
        return Err(Error::Shape(format!(
            "predictor returned {} maps for {} inputs",
            maps.len(),
            views.len()
        )));
    }
    pairs
        .iter()
        .zip(maps.chunks(VIEWS.len()))
        .map(|(pair, group)| {
            let mut acc = Array2::<f64>::zeros(pair.size());
            for (map, (h, v)) in group.iter().zip(VIEWS) {
                if map.dim() != pair.size() {
                    return Err(Error::Shape(format!(
                        "prediction for {} is {:?}, expected {:?}",
                        pair.id,
                        map.dim(),
                        pair.size()
                    )));
                }
                let restored = flip2(&map.probabilities, h, v);
                acc.zip_mut_with(&restored, |a, p| *a += *p as f64);
            }
            Ok(ChangeMap::new(acc.mapv(|a| (a / VIEWS.len() as f64) as f32)))
        })
        .collect()
}
