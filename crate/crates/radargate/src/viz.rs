//! Minimal SVG 1.1 scatter plots: a Cartesian panel and a polar-grid panel
//! side by side in a fixed 800x400 viewbox. No external plotting machinery;
//! artifacts are plain static files.

/// One labeled point group.
pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Radius of the point markers.
    pub size: f64,
}

const W: f64 = 800.0;
const H: f64 = 400.0;
const PANEL: f64 = 360.0;
const MARGIN: f64 = 20.0;

fn fmt(v: f64) -> String {
    format!("{:.3}", v)
}

/// Render the two-panel scatter. Both panels show the same points; the right
/// panel draws a polar grid (radius rings and angle spokes) behind them.
pub fn two_panel_scatter(title: &str, series: &[Series<'_>]) -> String {
    let mut max_abs = 1e-9f64;
    for s in series {
        for &(x, y) in &s.points {
            max_abs = max_abs.max(x.abs()).max(y.abs());
        }
    }
    let scale = (PANEL / 2.0 - 10.0) / max_abs;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"0 0 {W} {H}\" width=\"{W}\" height=\"{H}\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"14\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    ));

    for (panel, polar) in [(0usize, false), (1usize, true)] {
        let cx = MARGIN + PANEL / 2.0 + panel as f64 * (PANEL + 2.0 * MARGIN);
        let cy = H / 2.0 + 10.0;
        out.push_str(&format!(
            "  <rect x=\"{}\" y=\"{}\" width=\"{PANEL}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#999\"/>\n",
            fmt(cx - PANEL / 2.0),
            fmt(cy - PANEL / 2.0)
        ));
        if polar {
            for ring in 1..=4 {
                let r = PANEL / 2.0 * ring as f64 / 4.0 - 2.0;
                out.push_str(&format!(
                    "  <circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"none\" stroke=\"#ddd\"/>\n",
                    fmt(cx),
                    fmt(cy),
                    fmt(r)
                ));
            }
            for spoke in 0..12 {
                let a = std::f64::consts::PI * spoke as f64 / 6.0;
                let r = PANEL / 2.0 - 2.0;
                out.push_str(&format!(
                    "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#eee\"/>\n",
                    fmt(cx),
                    fmt(cy),
                    fmt(cx + r * a.cos()),
                    fmt(cy + r * a.sin())
                ));
            }
        } else {
            out.push_str(&format!(
                "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
                fmt(cx - PANEL / 2.0),
                fmt(cy),
                fmt(cx + PANEL / 2.0),
                fmt(cy)
            ));
            out.push_str(&format!(
                "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
                fmt(cx),
                fmt(cy - PANEL / 2.0),
                fmt(cx),
                fmt(cy + PANEL / 2.0)
            ));
        }
        for s in series {
            for &(x, y) in &s.points {
                out.push_str(&format!(
                    "  <circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{}\" fill-opacity=\"0.8\"/>\n",
                    fmt(cx + x * scale),
                    fmt(cy - y * scale),
                    fmt(s.size),
                    s.color
                ));
            }
        }
    }

    // legend
    let mut ly = 30.0;
    for s in series {
        out.push_str(&format!(
            "  <circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/>\n",
            fmt(W - 110.0),
            fmt(ly - 4.0),
            s.color
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\">{}</text>\n",
            fmt(W - 100.0),
            fmt(ly),
            xml_escape(s.label)
        ));
        ly += 14.0;
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Well-formedness check used by tests and the demo driver: tags balance and
/// attribute quoting is sane. Not a general XML parser, just enough to catch
/// a malformed emitter.
pub fn roughly_well_formed(svg: &str) -> bool {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = svg;
    while let Some(open) = rest.find('<') {
        rest = &rest[open + 1..];
        let close = match rest.find('>') {
            Some(c) => c,
            None => return false,
        };
        let tag = &rest[..close];
        rest = &rest[close + 1..];
        if tag.starts_with('?') || tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            match stack.pop() {
                Some(top) if top == name => {}
                _ => return false,
            }
        } else if !tag.ends_with('/') {
            let name: String = tag.split_whitespace().next().unwrap_or("").to_string();
            if name.is_empty() {
                return false;
            }
            stack.push(name);
        }
        // quotes must balance within a tag
        if tag.matches('"').count() % 2 != 0 {
            return false;
        }
    }
    stack.is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_svg() {
        let svg = two_panel_scatter(
            "demo",
            &[
                Series {
                    label: "raw",
                    color: "#1f77b4",
                    points: vec![(0.5, 0.2), (-0.3, 0.9)],
                    size: 4.0,
                },
                Series {
                    label: "target <&>",
                    color: "#d62728",
                    points: vec![(1.0, -1.0)],
                    size: 6.0,
                },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("viewBox=\"0 0 800 400\""));
        assert!(roughly_well_formed(&svg));
        assert!(!roughly_well_formed("<svg><circle></svg>"));
    }
}
