//! Plot font registration. The bitmap text backend has no system font
//! discovery, so the first available TTF from a list of common locations
//! (or `MTOR_FONT`) is registered as "sans-serif" once per process.

use std::sync::Once;

use plotters::style::FontStyle;

const CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Helvetica.ttc",
];

static INIT: Once = Once::new();

/// Register a fallback "sans-serif" font; harmless to call repeatedly.
pub fn ensure_fonts() {
    INIT.call_once(|| {
        let explicit = std::env::var("MTOR_FONT").ok();
        let paths = explicit.iter().map(String::as_str).chain(CANDIDATES.iter().copied());
        for path in paths {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok()
                {
                    return;
                }
            }
        }
        eprintln!(
            "warning: no TTF font found for plot labels; set MTOR_FONT to a .ttf path"
        );
    });
}
