use candle_core::Tensor;

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::Plane;
use crate::nn::{from_tokens, resize_bilinear, to_tokens, Linear, ParamBuilder};
use crate::pqt::ConditionSet;

/// Stand-in for the positional-query transformers: per level, raw view
/// features are resized, concatenated channel-wise and linearly projected
/// to the condition width.
#[derive(Debug, Clone)]
pub struct FeatureBypass {
    views: usize,
    projections: Vec<Linear>,
}

impl FeatureBypass {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channel_plan: &[usize],
        views: usize,
        cond_channels: usize,
    ) -> Result<Self> {
        if !(1..=2).contains(&views) {
            return Err(Error::Config(format!(
                "bypass supports one or two views, got {views}"
            )));
        }
        let projections = channel_plan
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                Linear::new(
                    &mut pb.push(format!("level{l}")),
                    views * c,
                    cond_channels,
                    false,
                )
            })
            .collect::<Result<_>>()?;
        Ok(FeatureBypass { views, projections })
    }
}

/// Builds a [`ConditionSet`] directly from X-ray features (no positional
/// queries). `target_sizes` holds the `(H_l, W_l)` of each tap.
pub fn make_unconditioned_inputs(
    bypass: &FeatureBypass,
    f_pa: &FeaturePyramid,
    f_lat: Option<&FeaturePyramid>,
    target_sizes: &[(usize, usize)],
    tags: Vec<(Plane, usize)>,
) -> Result<ConditionSet> {
    let views = 1 + usize::from(f_lat.is_some());
    if views != bypass.views {
        return Err(Error::Shape(format!(
            "bypass built for {} views, got {views}",
            bypass.views
        )));
    }
    if target_sizes.len() != bypass.projections.len() || f_pa.levels.len() != target_sizes.len() {
        return Err(Error::Shape(
            "level count mismatch between features, taps and bypass".into(),
        ));
    }
    let levels = target_sizes
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            let mut maps = vec![resize_bilinear(&f_pa.levels[l], h, w)?];
            if let Some(lat) = f_lat {
                maps.push(resize_bilinear(&lat.levels[l], h, w)?);
            }
            let joined = Tensor::cat(&maps, 1)?;
            let projected = bypass.projections[l].forward(&to_tokens(&joined)?)?;
            from_tokens(&projected, h, w)
        })
        .collect::<Result<_>>()?;
    Ok(ConditionSet { levels, tags })
}
