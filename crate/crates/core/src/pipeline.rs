//! Stage orchestration shared by the command-line driver and the tests.

use crate::config::PipelineConfig;
use crate::embednet::{forward_semantic, MlpModel, PixelFeaturizer};
use crate::error::Result;
use crate::geometry::voronoi_regions;
use crate::grouping::{connected_component_baseline, infer_with_probability};
use crate::pseudolabel::{
    build_cluster_features, instance_pseudo_labels, kmeans_cluster_labels, voronoi_label,
    InstancePseudoLabels,
};
use crate::raster::{InstanceLabelMap, PointSet, ProbabilityMap, RasterImage, SemanticLabelMap};
use crate::train::{train_ien, train_spn, IenSample, SpnSample, TrainReport};

/// An image with its point annotations.
#[derive(Debug, Clone, Copy)]
pub struct Annotated<'a> {
    pub image: &'a RasterImage,
    pub points: &'a PointSet,
}

/// Cluster label and Voronoi label of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabels {
    pub cluster: SemanticLabelMap,
    pub voronoi: SemanticLabelMap,
}

pub fn semantic_labels(
    image: &RasterImage,
    points: &PointSet,
    cfg: &PipelineConfig,
) -> Result<SemanticLabels> {
    let (h, w) = image.shape();
    points.check_bounds(h, w)?;
    let features = build_cluster_features(image, points, cfg)?;
    Ok(SemanticLabels {
        cluster: kmeans_cluster_labels(&features, cfg.k_clusters, cfg.seed)?,
        voronoi: voronoi_label(points, h, w)?,
    })
}

pub fn fit_spn(
    images: &[&RasterImage],
    labels: &[SemanticLabels],
    cfg: &PipelineConfig,
) -> Result<(MlpModel, TrainReport)> {
    let samples: Vec<SpnSample> = images
        .iter()
        .zip(labels)
        .map(|(image, l)| SpnSample {
            image,
            cluster: &l.cluster,
            voronoi: &l.voronoi,
        })
        .collect();
    train_spn(&samples, cfg, cfg.spn_epochs, cfg.spn_lr)
}

pub fn probability_map(
    spn: &MlpModel,
    image: &RasterImage,
    cfg: &PipelineConfig,
) -> Result<ProbabilityMap> {
    let features = PixelFeaturizer::from_config(cfg).featurize(image);
    forward_semantic(spn, features.view(), image.height(), image.width())
}

/// Instance pseudo-labels from a probability map and the annotation points.
pub fn instance_labels(
    prob: &ProbabilityMap,
    points: &PointSet,
    cfg: &PipelineConfig,
) -> Result<InstancePseudoLabels> {
    let (h, w) = prob.shape();
    let regions = voronoi_regions(points, h, w)?;
    instance_pseudo_labels(prob, &regions, cfg)
}

pub fn fit_ien(
    images: &[&RasterImage],
    labels: &[InstancePseudoLabels],
    cfg: &PipelineConfig,
) -> Result<(MlpModel, TrainReport)> {
    let samples: Vec<IenSample> = images
        .iter()
        .zip(labels)
        .map(|(image, labels)| IenSample { image, labels })
        .collect();
    train_ien(&samples, cfg, cfg.ien_epochs, cfg.ien_lr)
}

/// Instance map of one image given the semantic and embedding models.
pub fn segment(
    image: &RasterImage,
    spn: &MlpModel,
    ien: &MlpModel,
    cfg: &PipelineConfig,
) -> Result<InstanceLabelMap> {
    let features = PixelFeaturizer::from_config(cfg).featurize(image);
    let prob = forward_semantic(spn, features.view(), image.height(), image.width())?;
    infer_with_probability(&features, &prob, ien, cfg)
}

/// Everything produced by a full two-stage run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub spn: MlpModel,
    pub spn_report: TrainReport,
    pub ien: MlpModel,
    pub ien_report: TrainReport,
    pub semantic: Vec<SemanticLabels>,
    pub probabilities: Vec<ProbabilityMap>,
    pub pseudo: Vec<InstancePseudoLabels>,
    pub instances: Vec<InstanceLabelMap>,
    /// Connected components of the semantic output, no embeddings.
    pub baseline: Vec<InstanceLabelMap>,
}

/// Labels, both training stages and inference over the same images.
pub fn run(data: &[Annotated<'_>], cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let images: Vec<&RasterImage> = data.iter().map(|d| d.image).collect();
    let semantic = data
        .iter()
        .map(|d| semantic_labels(d.image, d.points, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (spn, spn_report) = fit_spn(&images, &semantic, cfg)?;
    let probabilities = images
        .iter()
        .map(|img| probability_map(&spn, img, cfg))
        .collect::<Result<Vec<_>>>()?;
    let pseudo = probabilities
        .iter()
        .zip(data)
        .map(|(p, d)| instance_labels(p, d.points, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (ien, ien_report) = fit_ien(&images, &pseudo, cfg)?;
    let featurizer = PixelFeaturizer::from_config(cfg);
    let instances = images
        .iter()
        .zip(&probabilities)
        .map(|(img, p)| infer_with_probability(&featurizer.featurize(img), p, &ien, cfg))
        .collect::<Result<Vec<_>>>()?;
    let baseline = probabilities
        .iter()
        .map(|p| connected_component_baseline(p, cfg))
        .collect();
    Ok(PipelineRun {
        spn,
        spn_report,
        ien,
        ien_report,
        semantic,
        probabilities,
        pseudo,
        instances,
        baseline,
    })
}
