//! SVG rendering of detection traces: one panel per step, box overlays,
//! ground truth, action labels and the masking crosses of later episodes.

use std::fmt::Write as _;

use base64::Engine as _;

use crate::agent::ImagePrediction;
use crate::env::EpisodeTrace;
use crate::geometry::{iou, BBox};
use crate::imaging::{cross_bars, encode_png, mask_cross, GrayImage};
use crate::{Error, Result};

const PANEL_GAP: f64 = 8.0;
const LABEL_HEIGHT: f64 = 16.0;

/// Layout options.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    /// Pixels per image pixel.
    pub scale: f64,
    /// Panels per row before wrapping.
    pub columns: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            scale: 2.0,
            columns: 8,
        }
    }
}

fn check_box(b: &BBox, w: usize, h: usize, what: &str) -> Result<()> {
    if !b.is_valid() || !b.within(w, h) {
        return Err(Error::Contract(format!(
            "{what} {b:?} does not fit the {w}x{h} image"
        )));
    }
    Ok(())
}

/// Checks that `trace` can have been recorded on `image`.
pub fn check_trace(image: &GrayImage, trace: &ImagePrediction) -> Result<()> {
    let (w, h) = (image.width(), image.height());
    if trace.width != w || trace.height != h {
        return Err(Error::Contract(format!(
            "trace was recorded on a {}x{} image, got {w}x{h}",
            trace.width, trace.height
        )));
    }
    if trace.traces.is_empty() {
        return Err(Error::Contract(format!("trace for {} holds no episodes", trace.file)));
    }
    for ep in &trace.traces {
        check_box(&ep.initial_box, w, h, "initial box")?;
        for b in &ep.masked {
            check_box(b, w, h, "masked box")?;
        }
        for s in &ep.steps {
            check_box(&s.bbox, w, h, "step box")?;
        }
    }
    for a in &trace.ground_truth {
        check_box(&a.bbox, w, h, "annotation")?;
    }
    Ok(())
}

fn rect(s: &mut String, class: &str, b: &BBox, ox: f64, oy: f64, k: f64, style: &str) {
    let _ = writeln!(
        s,
        r#"<rect class="{class}" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" {style}/>"#,
        ox + b.x_min * k,
        oy + b.y_min * k,
        b.width() * k,
        b.height() * k
    );
}

/// The image an episode observed: the original with the crosses of every
/// earlier detection painted in.
pub fn episode_image(image: &GrayImage, ep: &EpisodeTrace) -> Result<GrayImage> {
    let mut img = image.clone();
    for b in &ep.masked {
        img = mask_cross(&img, b, ep.mask_bar_fraction)?;
    }
    Ok(img)
}

/// Renders every episode of `trace` as a row of panels: the reset state, then
/// one panel per step with the box after that step, its action and reward.
pub fn render_svg(image: &GrayImage, trace: &ImagePrediction, opts: &RenderOptions) -> Result<String> {
    check_trace(image, trace)?;
    let k = opts.scale;
    let (pw, ph) = (image.width() as f64 * k, image.height() as f64 * k);
    let cols = opts.columns.max(1);
    let rows_per_episode: Vec<usize> = trace.traces.iter().map(|e| (e.steps.len() + 1).div_ceil(cols)).collect();
    let total_rows: usize = rows_per_episode.iter().sum();
    let max_panels = trace.traces.iter().map(|e| e.steps.len() + 1).max().unwrap_or(1).min(cols);
    let width = max_panels as f64 * (pw + PANEL_GAP) + PANEL_GAP;
    let height = total_rows as f64 * (ph + LABEL_HEIGHT + PANEL_GAP) + PANEL_GAP;
    let gts: Vec<BBox> = trace.ground_truth.iter().map(|a| a.bbox).collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{width:.0}" height="{height:.0}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, "<title>{}</title>", trace.file);
    s.push_str("<defs>\n");
    for (e, ep) in trace.traces.iter().enumerate() {
        let png = encode_png(&episode_image(image, ep)?);
        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
        let _ = writeln!(
            s,
            r#"<image id="episode-{e}" width="{pw:.3}" height="{ph:.3}" style="image-rendering:pixelated" xlink:href="data:image/png;base64,{b64}"/>"#
        );
    }
    s.push_str("</defs>\n");

    let mut row = 0usize;
    for (e, ep) in trace.traces.iter().enumerate() {
        let _ = writeln!(s, r#"<g class="episode" data-episode="{e}" data-triggered="{}">"#, ep.triggered);
        let boxes = std::iter::once(ep.initial_box).chain(ep.steps.iter().map(|st| st.bbox));
        for (p, b) in boxes.enumerate() {
            let ox = PANEL_GAP + (p % cols) as f64 * (pw + PANEL_GAP);
            let oy = PANEL_GAP + (row + p / cols) as f64 * (ph + LABEL_HEIGHT + PANEL_GAP);
            let _ = writeln!(s, r#"<g class="panel" data-step="{p}">"#);
            let _ = writeln!(s, r##"<use xlink:href="#episode-{e}" x="{ox:.3}" y="{oy:.3}"/>"##);
            for m in &ep.masked {
                if let Some(bars) = cross_bars(image.width(), image.height(), m, ep.mask_bar_fraction) {
                    for (x0, y0, x1, y1) in bars {
                        let bar = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
                        rect(&mut s, "mask-cross", &bar, ox, oy, k, r##"fill="none" stroke="#d33" stroke-dasharray="2,2""##);
                    }
                }
            }
            for g in &gts {
                rect(&mut s, "gt", g, ox, oy, k, r##"fill="none" stroke="#2a2" stroke-width="1""##);
            }
            let last = p == ep.steps.len();
            let color = if last && ep.triggered { "#fc0" } else { "#29f" };
            rect(&mut s, "box", &b, ox, oy, k, &format!(r#"fill="none" stroke="{color}" stroke-width="2""#));
            let label = if p == 0 {
                "reset".to_string()
            } else {
                let st = &ep.steps[p - 1];
                let mut l = format!("{p} {} r={:+}", st.action.label(), st.reward);
                if last && ep.triggered {
                    let v = gts.iter().map(|g| iou(&b, g)).fold(0.0, f64::max);
                    let _ = write!(l, " IoU={v:.2}");
                }
                l
            };
            let _ = writeln!(
                s,
                r#"<text x="{:.3}" y="{:.3}">{label}</text>"#,
                ox,
                oy + ph + LABEL_HEIGHT - 4.0
            );
            s.push_str("</g>\n");
        }
        row += rows_per_episode[e];
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Detection, TraceStep};
    use crate::geometry::Action;

    fn trace(masked: Vec<BBox>) -> ImagePrediction {
        let b0 = BBox::full(32, 32);
        let b1 = BBox::new(3.2, 3.2, 28.8, 28.8);
        let ep = |masked: Vec<BBox>| EpisodeTrace {
            masked,
            mask_bar_fraction: 1.0 / 3.0,
            initial_box: b0,
            steps: vec![
                TraceStep {
                    action: Action::Smaller,
                    bbox: b1,
                    reward: 1.0,
                    q: Some(0.5),
                    iou: 0.4,
                },
                TraceStep {
                    action: Action::Trigger,
                    bbox: b1,
                    reward: -3.0,
                    q: Some(0.1),
                    iou: 0.4,
                },
            ],
            triggered: true,
        };
        let mut traces = vec![ep(Vec::new())];
        if !masked.is_empty() {
            traces.push(ep(masked));
        }
        ImagePrediction {
            file: "img.png".into(),
            width: 32,
            height: 32,
            ground_truth: Vec::new(),
            detections: vec![Detection {
                bbox: b1,
                score: 0.1,
                steps: 2,
            }],
            steps: 2,
            traces,
        }
    }

    #[test]
    fn one_panel_per_step_plus_reset() {
        let img = GrayImage::filled(32, 32, 0.5);
        let svg = render_svg(&img, &trace(Vec::new()), &RenderOptions::default()).unwrap();
        assert_eq!(svg.matches(r#"class="panel""#).count(), 3);
        assert_eq!(svg.matches(r#"class="box""#).count(), 3);
        assert!(svg.contains(r#"x="8.000" y="8.000" width="64.000" height="64.000""#));
        assert!(svg.contains("TRIGGER r=-3"));
        assert!(!svg.contains("mask-cross"));
    }

    #[test]
    fn masked_episode_shows_cross() {
        let img = GrayImage::filled(32, 32, 0.5);
        let svg = render_svg(&img, &trace(vec![BBox::new(3.2, 3.2, 28.8, 28.8)]), &RenderOptions::default()).unwrap();
        // two bars on each of the second episode's three panels
        assert_eq!(svg.matches(r#"class="mask-cross""#).count(), 6);
        assert_eq!(svg.matches("<image ").count(), 2);
    }

    #[test]
    fn mismatched_image_is_rejected() {
        let img = GrayImage::filled(16, 16, 0.5);
        assert!(matches!(
            render_svg(&img, &trace(Vec::new()), &RenderOptions::default()),
            Err(Error::Contract(_))
        ));
    }
}
