use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use super::Generator;
use crate::nn::{Conv2d, Net, ParamInit, Shape4, ShapeEvent};
use crate::{Error, Result};

/// Per-site 1x1 projections from student tap channels to teacher tap channels.
#[derive(Debug, Default)]
pub struct AdapterSet {
    sites: Vec<String>,
    convs: Vec<Conv2d>,
}

impl AdapterSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds one adapter per site, using tap shapes inferred at `probe` input shape.
    pub fn attach(
        student: &Generator,
        teacher: &Generator,
        sites: &[String],
        probe: Shape4,
        init: &mut ParamInit,
    ) -> Result<Self> {
        let s_shapes: BTreeMap<_, _> = student.tap_shapes(probe)?.into_iter().collect();
        let t_shapes: BTreeMap<_, _> = teacher.tap_shapes(probe)?.into_iter().collect();
        let mut convs = Vec::with_capacity(sites.len());
        for site in sites {
            let s = s_shapes.get(site).ok_or_else(|| Error::MissingTap(format!("student:{site}")))?;
            let t = t_shapes.get(site).ok_or_else(|| Error::MissingTap(format!("teacher:{site}")))?;
            if s[2..] != t[2..] {
                return Err(Error::Shape(format!(
                    "site `{site}`: student tap {}x{} vs teacher tap {}x{}",
                    s[2], s[3], t[2], t[3]
                )));
            }
            if t[1] < s[1] {
                return Err(Error::InvalidSpec(format!(
                    "site `{site}`: teacher has {} channels, fewer than the student's {}",
                    t[1], s[1]
                )));
            }
            convs.push(init.conv(s[1], t[1], 1, 1, 0, 1, true)?);
        }
        Ok(Self {
            sites: sites.to_vec(),
            convs,
        })
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn weight_shape(&self, site: &str) -> Option<&[usize]> {
        let i = self.sites.iter().position(|s| s == site)?;
        Some(self.convs[i].weight.dims())
    }

    /// Projects captured student taps, in site order.
    pub fn project(&self, student_taps: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>> {
        self.sites
            .iter()
            .zip(&self.convs)
            .map(|(site, conv)| {
                let t = student_taps
                    .get(site)
                    .ok_or_else(|| Error::MissingTap(format!("student:{site}")))?;
                conv.forward(t)
            })
            .collect()
    }
}

impl Net for AdapterSet {
    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (site, conv) in self.sites.iter().zip(&self.convs) {
            out.push((format!("adapter.{site}.weight"), conv.weight.clone()));
            if let Some(b) = &conv.bias {
                out.push((format!("adapter.{site}.bias"), b.clone()));
            }
        }
        out
    }

    /// Adapters are independent per site and have no single input shape.
    fn walk_shapes(&self, input: Shape4, _visit: &mut dyn FnMut(ShapeEvent<'_>)) -> Result<Shape4> {
        Err(Error::Shape(format!(
            "adapter set has no sequential shape (probe {input:?})"
        )))
    }
}
