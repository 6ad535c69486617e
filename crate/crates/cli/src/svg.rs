use std::fmt::Write as _;

/// One horizontal band of per-frame, per-class values in `[0, 1]`.
pub struct Strip<'a> {
    pub label: String,
    /// Frame index of the first row of `values`.
    pub first_frame: usize,
    pub values: &'a [Vec<f64>],
}

const FRAME_W: f64 = 2.0;
const ROW_H: f64 = 6.0;
const GAP: f64 = 10.0;
const LABEL_W: f64 = 90.0;

/// Renders strips stacked vertically, one row per class, frames on the x axis.
pub fn timeline_svg(
    title: &str,
    classes: &[String],
    num_frames: usize,
    strips: &[Strip<'_>],
) -> String {
    let band = ROW_H * classes.len() as f64;
    let width = LABEL_W + FRAME_W * num_frames as f64 + 10.0;
    let height = 24.0 + strips.len() as f64 * (band + GAP + 12.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="9">"#
    );
    let _ = writeln!(
        out,
        r#"<text x="4" y="14" font-size="11">{}</text>"#,
        escape(title)
    );
    let mut y = 24.0;
    for strip in strips {
        let _ = writeln!(
            out,
            r#"<text x="4" y="{}">{}</text>"#,
            y + 8.0,
            escape(&strip.label)
        );
        y += 12.0;
        let _ = writeln!(
            out,
            r##"<rect x="{LABEL_W}" y="{y}" width="{}" height="{band}" fill="none" stroke="#999" stroke-width="0.5"/>"##,
            FRAME_W * num_frames as f64
        );
        for (c, name) in classes.iter().enumerate() {
            let row_y = y + ROW_H * c as f64;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="5">{}</text>"#,
                LABEL_W - 30.0,
                row_y + 5.0,
                escape(name)
            );
            let mut f = 0;
            while f < strip.values.len() {
                let v = strip.values[f]
                    .get(c)
                    .copied()
                    .unwrap_or(0.0)
                    .clamp(0.0, 1.0);
                let mut end = f + 1;
                while end < strip.values.len()
                    && strip.values[end]
                        .get(c)
                        .copied()
                        .unwrap_or(0.0)
                        .clamp(0.0, 1.0)
                        == v
                {
                    end += 1;
                }
                let opacity = format!("{v:.3}");
                if opacity != "0.000" {
                    let x = LABEL_W + FRAME_W * (strip.first_frame + f) as f64;
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x}" y="{row_y}" width="{}" height="{ROW_H}" fill="#1f5fbf" fill-opacity="{opacity}"/>"##,
                        FRAME_W * (end - f) as f64
                    );
                }
                f = end;
            }
        }
        y += band + GAP;
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
