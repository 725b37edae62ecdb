//! VOC-style dataset reading and writing.
//!
//! Annotations use the Pascal VOC XML dialect with 1-based inclusive pixel
//! coordinates on disk; in memory every box is 0-based half-open, so
//! `xmin` becomes `x0 = xmin - 1` and `xmax` stays `x1 = xmax`.
//!
//! Instance masks follow the `SegmentationObject` convention: pixel value `k`
//! marks the k-th annotated object, 0 is background and 255 is void.
//!
//! Directory layout:
//!
//! ```text
//! root/Annotations/<id>.xml
//! root/JPEGImages/<id>.png|jpg
//! root/SegmentationObject/<id>.png   (optional)
//! root/Provenance/<id>.json          (written for augmented sets)
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::augment::AugmentedRecord;
use crate::error::{Error, IoContext, Result};
use crate::geometry::BoundingBox;
use crate::raster::{Grid, Mask};

pub const ANNOTATIONS_DIR: &str = "Annotations";
pub const IMAGES_DIR: &str = "JPEGImages";
pub const MASKS_DIR: &str = "SegmentationObject";
pub const PROVENANCE_DIR: &str = "Provenance";

/// Mask pixel value ignored by decoding.
pub const VOID_ID: u8 = 255;

/// Masks may extend this far past their object's box.
const MASK_BOX_TOLERANCE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedObject {
    pub category: String,
    pub bbox: BoundingBox,
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<AnnotatedObject>,
}

impl ImageAnnotation {
    pub fn boxes(&self) -> impl Iterator<Item = &BoundingBox> {
        self.objects.iter().map(|o| &o.bbox)
    }

    pub fn has_category(&self, category: &str) -> bool {
        self.objects.iter().any(|o| o.category == category)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(format!(
                "{}: image size must be positive",
                self.image_id
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.within_image(self.width, self.height) {
                return Err(Error::validation(format!(
                    "{}: object {i} box {:?} lies outside the {}x{} image",
                    self.image_id, o.bbox, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Per-object binary masks, index-aligned with [`ImageAnnotation::objects`].
pub type InstanceMaskSet = Vec<Mask>;

/// An image held in memory together with its labels.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub annotation: ImageAnnotation,
    pub image: RgbImage,
    pub masks: Option<InstanceMaskSet>,
}

fn xml_error(e: roxmltree::Error) -> Error {
    Error::Xml {
        line: e.pos().row,
        message: e.to_string(),
    }
}

fn child<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<roxmltree::Node<'a, 'a>> {
    node.children().find(|n| n.has_tag_name(name))
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    child(node, name).map(|n| n.text().unwrap_or("").trim())
}

fn parse_number(text: &str, what: &str) -> Result<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::validation(format!("`{what}` is not a number: {text:?}")))
}

pub fn parse_annotation(xml: &[u8]) -> Result<ImageAnnotation> {
    let text = std::str::from_utf8(xml).map_err(|e| Error::Xml {
        line: 1,
        message: format!("invalid UTF-8: {e}"),
    })?;
    let doc = roxmltree::Document::parse(text).map_err(xml_error)?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::validation(format!(
            "root element is <{}>, expected <annotation>",
            root.tag_name().name()
        )));
    }

    let filename = child_text(root, "filename")
        .ok_or_else(|| Error::validation("annotation has no <filename>"))?;
    let image_id = Path::new(filename)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(filename)
        .to_string();

    let size = child(root, "size").ok_or_else(|| Error::validation("annotation has no <size>"))?;
    let dim = |name: &str| -> Result<u32> {
        let t = child_text(size, name)
            .ok_or_else(|| Error::validation(format!("<size> has no <{name}>")))?;
        let v = parse_number(t, name)?;
        if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::validation(format!("invalid image {name} {t}")));
        }
        Ok(v as u32)
    };
    let width = dim("width")?;
    let height = dim("height")?;

    let mut objects = Vec::new();
    for (index, obj) in root.children().filter(|n| n.has_tag_name("object")).enumerate() {
        let missing = |field: &str| Error::Schema {
            object_index: index,
            field: field.to_string(),
        };
        let category = child_text(obj, "name").ok_or_else(|| missing("name"))?.to_string();
        let difficult = match child_text(obj, "difficult") {
            None | Some("") | Some("0") => false,
            Some("1") => true,
            Some(other) => {
                return Err(Error::validation(format!(
                    "object {index}: bad <difficult> value {other:?}"
                )))
            }
        };
        let bnd = child(obj, "bndbox").ok_or_else(|| missing("bndbox"))?;
        let coord = |name: &str| -> Result<f64> {
            let t = child_text(bnd, name).ok_or_else(|| missing(name))?;
            parse_number(t, name)
        };
        let (xmin, ymin, xmax, ymax) = (coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        let bbox = BoundingBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax)
            .map_err(|e| Error::validation(format!("object {index}: {e}")))?;
        objects.push(AnnotatedObject {
            category,
            bbox,
            difficult,
        });
    }

    let ann = ImageAnnotation {
        image_id,
        width,
        height,
        objects,
    };
    ann.validate()?;
    Ok(ann)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn fmt_coord(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Serializes an annotation in the same dialect [`parse_annotation`] reads.
pub fn annotation_to_xml(ann: &ImageAnnotation) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    let _ = writeln!(s, "\t<filename>{}.png</filename>", escape(&ann.image_id));
    s.push_str("\t<size>\n");
    let _ = writeln!(s, "\t\t<width>{}</width>", ann.width);
    let _ = writeln!(s, "\t\t<height>{}</height>", ann.height);
    s.push_str("\t\t<depth>3</depth>\n\t</size>\n");
    for o in &ann.objects {
        s.push_str("\t<object>\n");
        let _ = writeln!(s, "\t\t<name>{}</name>", escape(&o.category));
        let _ = writeln!(s, "\t\t<difficult>{}</difficult>", o.difficult as u8);
        s.push_str("\t\t<bndbox>\n");
        let _ = writeln!(s, "\t\t\t<xmin>{}</xmin>", fmt_coord(o.bbox.x0 + 1.0));
        let _ = writeln!(s, "\t\t\t<ymin>{}</ymin>", fmt_coord(o.bbox.y0 + 1.0));
        let _ = writeln!(s, "\t\t\t<xmax>{}</xmax>", fmt_coord(o.bbox.x1));
        let _ = writeln!(s, "\t\t\t<ymax>{}</ymax>", fmt_coord(o.bbox.y1));
        s.push_str("\t\t</bndbox>\n\t</object>\n");
    }
    s.push_str("</annotation>\n");
    s
}

fn png_error(e: png::DecodingError) -> Error {
    Error::validation(format!("cannot decode mask PNG: {e}"))
}

/// Reads raw 8-bit sample values (palette indices for paletted files).
pub fn decode_mask_ids(png_bytes: &[u8]) -> Result<Grid<u8>> {
    let mut decoder = png::Decoder::new(Cursor::new(png_bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::validation("mask PNG is too large"))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::validation(format!(
            "mask must be 8-bit, got {:?}",
            frame.bit_depth
        )));
    }
    match frame.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => {
            return Err(Error::validation(format!(
                "mask must be paletted or grayscale, got {other:?}"
            )))
        }
    }
    let (w, h) = (frame.width, frame.height);
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for row in buf.chunks(stride).take(h as usize) {
        data.extend_from_slice(&row[..w as usize]);
    }
    Ok(Grid::from_vec(w, h, data).expect("row copy matches dimensions"))
}

/// The standard VOC color map used for paletted masks.
fn voc_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c) & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

/// Encodes instance ids as a paletted PNG.
pub fn encode_mask_ids(ids: &Grid<u8>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, ids.width(), ids.height());
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(voc_palette());
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::validation(format!("png: {e}")))?;
        writer
            .write_image_data(ids.as_slice())
            .map_err(|e| Error::validation(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn decode_instance_mask(png_bytes: &[u8], ann: &ImageAnnotation) -> Result<InstanceMaskSet> {
    let ids = decode_mask_ids(png_bytes)?;
    masks_from_ids(&ids, ann)
}

pub fn masks_from_ids(ids: &Grid<u8>, ann: &ImageAnnotation) -> Result<InstanceMaskSet> {
    if ids.dimensions() != (ann.width, ann.height) {
        return Err(Error::validation(format!(
            "{}: mask is {}x{} but image is {}x{}",
            ann.image_id,
            ids.width(),
            ids.height(),
            ann.width,
            ann.height
        )));
    }
    let n = ann.objects.len();
    if let Some(&bad) = ids
        .iter()
        .find(|&&v| v != 0 && v != VOID_ID && v as usize > n)
    {
        return Err(Error::UnmatchedInstance(bad));
    }
    let masks: Vec<Mask> = (1..=n)
        .map(|k| ids.map(|&v| v as usize == k))
        .collect();
    for (i, (m, o)) in masks.iter().zip(&ann.objects).enumerate() {
        let Some(tight) = m.tight_box() else {
            return Err(Error::validation(format!(
                "{}: object {i} has an empty mask",
                ann.image_id
            )));
        };
        let b = &o.bbox;
        let t = MASK_BOX_TOLERANCE;
        if tight.x0 < b.x0 - t || tight.y0 < b.y0 - t || tight.x1 > b.x1 + t || tight.y1 > b.y1 + t
        {
            return Err(Error::validation(format!(
                "{}: mask of object {i} spans {tight:?}, outside its box {b:?}",
                ann.image_id
            )));
        }
    }
    Ok(masks)
}

/// Inverse of [`masks_from_ids`]: later masks win on overlap.
pub fn ids_from_masks(masks: &[Mask], width: u32, height: u32) -> Grid<u8> {
    let mut ids = Grid::filled(width, height, 0u8);
    for (k, m) in masks.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                if *m.get(x, y) {
                    ids.set(x, y, (k + 1) as u8);
                }
            }
        }
    }
    ids
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, bytes).at(path)
}

/// Writes image, annotation XML and provenance JSON; returns the paths in
/// that order.
pub fn write_augmented(rec: &AugmentedRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ann = &rec.annotation;
    if rec.image.dimensions() != (ann.width, ann.height) {
        return Err(Error::validation(format!(
            "{}: image is {:?} but annotation says {}x{}",
            ann.image_id,
            rec.image.dimensions(),
            ann.width,
            ann.height
        )));
    }
    ann.validate()?;
    let id = &ann.image_id;
    let image_path = out_dir.join(IMAGES_DIR).join(format!("{id}.png"));
    let xml_path = out_dir.join(ANNOTATIONS_DIR).join(format!("{id}.xml"));
    let prov_path = out_dir.join(PROVENANCE_DIR).join(format!("{id}.json"));
    write_file(&image_path, &encode_png(&rec.image)?)?;
    write_file(&xml_path, annotation_to_xml(ann).as_bytes())?;
    let mut json = serde_json::to_vec_pretty(&rec.provenance)?;
    json.push(b'\n');
    write_file(&prov_path, &json)?;
    Ok(vec![image_path, xml_path, prov_path])
}

/// Writes a labeled image (and its instance mask, if any) in VOC layout.
pub fn write_labeled(rec: &LabeledImage, out_dir: &Path) -> Result<()> {
    let id = &rec.annotation.image_id;
    write_file(
        &out_dir.join(IMAGES_DIR).join(format!("{id}.png")),
        &encode_png(&rec.image)?,
    )?;
    write_file(
        &out_dir.join(ANNOTATIONS_DIR).join(format!("{id}.xml")),
        annotation_to_xml(&rec.annotation).as_bytes(),
    )?;
    if let Some(masks) = &rec.masks {
        let ids = ids_from_masks(masks, rec.annotation.width, rec.annotation.height);
        write_file(
            &out_dir.join(MASKS_DIR).join(format!("{id}.png")),
            &encode_mask_ids(&ids)?,
        )?;
    }
    Ok(())
}

/// A VOC directory whose annotations have been parsed; pixels load lazily.
#[derive(Clone, Debug)]
pub struct VocDataset {
    pub root: PathBuf,
    pub annotations: Vec<ImageAnnotation>,
}

impl VocDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let ann_dir = root.join(ANNOTATIONS_DIR);
        let mut files: Vec<PathBuf> = fs::read_dir(&ann_dir)
            .at(&ann_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "xml"))
            .collect();
        files.sort();
        let mut annotations = Vec::with_capacity(files.len());
        for f in files {
            let bytes = fs::read(&f).at(&f)?;
            let ann = parse_annotation(&bytes).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("{}: {m}", f.display())),
                other => other,
            })?;
            annotations.push(ann);
        }
        Ok(Self { root, annotations })
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Sorted category names over all objects.
    pub fn categories(&self) -> Vec<String> {
        categories(self.annotations.iter())
    }

    pub fn image_path(&self, image_id: &str) -> Result<PathBuf> {
        for ext in ["png", "jpg", "jpeg"] {
            let p = self.root.join(IMAGES_DIR).join(format!("{image_id}.{ext}"));
            if p.exists() {
                return Ok(p);
            }
        }
        let p = self.root.join(IMAGES_DIR).join(format!("{image_id}.*"));
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
        ))
    }

    pub fn load(&self, index: usize) -> Result<LabeledImage> {
        let ann = &self.annotations[index];
        let path = self.image_path(&ann.image_id)?;
        let bytes = fs::read(&path).at(&path)?;
        let image = image::load_from_memory(&bytes)?.to_rgb8();
        if image.dimensions() != (ann.width, ann.height) {
            return Err(Error::validation(format!(
                "{}: image is {:?}, annotation says {}x{}",
                path.display(),
                image.dimensions(),
                ann.width,
                ann.height
            )));
        }
        let mask_path = self.root.join(MASKS_DIR).join(format!("{}.png", ann.image_id));
        let masks = if mask_path.exists() {
            let bytes = fs::read(&mask_path).at(&mask_path)?;
            Some(decode_instance_mask(&bytes, ann)?)
        } else {
            None
        };
        Ok(LabeledImage {
            annotation: ann.clone(),
            image,
            masks,
        })
    }

    pub fn load_all(&self) -> Result<Vec<LabeledImage>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

pub fn categories<'a>(anns: impl Iterator<Item = &'a ImageAnnotation>) -> Vec<String> {
    let set: BTreeSet<&str> = anns
        .flat_map(|a| a.objects.iter().map(|o| o.category.as_str()))
        .collect();
    set.into_iter().map(str::to_string).collect()
}
