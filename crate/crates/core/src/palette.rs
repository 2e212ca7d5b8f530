//! Fixed vocabulary of the toy garment world: eight colors and four texture
//! motifs. Shared by the toy dataset generator and the toy dual encoder so
//! captions and images agree by construction.

/// RGB channel index.
pub type Channel = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaletteColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
    pub dominant: Channel,
}

pub const PALETTE: [PaletteColor; 8] = [
    PaletteColor { name: "red", rgb: [200, 40, 40], dominant: 0 },
    PaletteColor { name: "orange", rgb: [224, 128, 32], dominant: 0 },
    PaletteColor { name: "pink", rgb: [232, 120, 184], dominant: 0 },
    PaletteColor { name: "green", rgb: [40, 168, 56], dominant: 1 },
    PaletteColor { name: "lime", rgb: [152, 216, 48], dominant: 1 },
    PaletteColor { name: "teal", rgb: [32, 152, 136], dominant: 1 },
    PaletteColor { name: "blue", rgb: [40, 72, 208], dominant: 2 },
    PaletteColor { name: "purple", rgb: [128, 48, 200], dominant: 2 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motif {
    Solid,
    /// Horizontal bands.
    Striped,
    /// Vertical bands.
    Ribbed,
    Checked,
}

impl Motif {
    pub const ALL: [Motif; 4] = [Motif::Solid, Motif::Striped, Motif::Ribbed, Motif::Checked];

    pub fn word(self) -> &'static str {
        match self {
            Motif::Solid => "solid",
            Motif::Striped => "striped",
            Motif::Ribbed => "ribbed",
            Motif::Checked => "checked",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the pixel at (x, y) is shaded. Bands are two pixels wide.
    pub fn shaded(self, x: u32, y: u32) -> bool {
        match self {
            Motif::Solid => false,
            Motif::Striped => (y / 2) % 2 == 1,
            Motif::Ribbed => (x / 2) % 2 == 1,
            Motif::Checked => (x / 2 + y / 2) % 2 == 1,
        }
    }

    /// Shaded pixels keep their hue and lose 3/8 of their intensity.
    pub fn apply(self, rgb: [u8; 3], x: u32, y: u32) -> [u8; 3] {
        if self.shaded(x, y) {
            rgb.map(|c| ((c as u32 * 5) / 8) as u8)
        } else {
            rgb
        }
    }
}

pub fn color_by_name(name: &str) -> Option<(usize, &'static PaletteColor)> {
    PALETTE.iter().enumerate().find(|(_, c)| c.name == name)
}

pub fn motif_by_word(word: &str) -> Option<Motif> {
    Motif::ALL.into_iter().find(|m| m.word() == word)
}

/// Neutral grays used for background and body in toy person images.
pub const BACKGROUND: [u8; 3] = [210, 210, 210];
pub const BODY: [u8; 3] = [120, 120, 120];
pub const HEAD: [u8; 3] = [150, 150, 150];
