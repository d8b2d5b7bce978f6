use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::imageio::{load_image, save_image, IMAGE_EXTENSIONS};
use crate::datamodel::{BoundingBox, GroundTruthObject, Image, LabeledImage};
use crate::error::{Error, Result};

const ANNOTATIONS: &str = "Annotations";
const IMAGES: &str = "JPEGImages";
const SPLITS: &str = "ImageSets/Main";
/// Optional list of class names, one per line, in label order.
const CLASS_LIST: &str = "classes.txt";

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename = "annotation")]
struct XmlAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    folder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filename: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<XmlSize>,
    #[serde(default, rename = "object")]
    objects: Vec<XmlObject>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct XmlSize {
    width: usize,
    height: usize,
    depth: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct XmlObject {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    difficult: Option<u8>,
    bndbox: XmlBox,
}

/// VOC boxes are 1-based inclusive pixel indices.
#[derive(Debug, Serialize, Deserialize)]
struct XmlBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl XmlBox {
    fn to_corners(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.xmin - 1.0, self.ymin - 1.0, self.xmax, self.ymax)
    }

    fn from_corners(b: &BoundingBox) -> Self {
        Self {
            xmin: b.x_min.round() + 1.0,
            ymin: b.y_min.round() + 1.0,
            xmax: b.x_max.round(),
            ymax: b.y_max.round(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    /// Class names; a label is an index into this list.
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads every image of the manifest.
    pub fn load_images(&self) -> Result<Vec<LabeledImage>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(LabeledImage {
                    image: load_image(&e.image_path)?.with_id(e.id.clone()),
                    objects: e.objects.clone(),
                })
            })
            .collect()
    }
}

/// A file that could not be loaded, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadIssue {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub manifest: DatasetManifest,
    pub issues: Vec<LoadIssue>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn find_image(dir: &Path, id: &str, filename: Option<&str>) -> Option<PathBuf> {
    let stem_candidates = IMAGE_EXTENSIONS.iter().map(|ext| dir.join(format!("{id}.{ext}")));
    filename
        .map(|f| dir.join(f))
        .into_iter()
        .chain(stem_candidates)
        .find(|p| p.is_file())
}

/// Reads `ImageSets/Main/{split}.txt`, then one `Annotations/{id}.xml` and
/// one image per id. Entries that fail are listed in the report and skipped.
/// `classes` fixes the label order; without it the order comes from
/// `classes.txt` at the root, or else is the sorted set of names found.
pub fn load_voc_style(root: &Path, split: &str, classes: Option<&[String]>) -> Result<LoadReport> {
    let ann_dir = root.join(ANNOTATIONS);
    if !ann_dir.is_dir() {
        return Err(Error::io(
            &ann_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "annotation directory not found"),
        ));
    }
    let split_path = root.join(SPLITS).join(format!("{split}.txt"));
    let ids: Vec<String> = read(&split_path)?
        .lines()
        .map(|l| l.split_whitespace().next().unwrap_or("").to_string())
        .filter(|l| !l.is_empty())
        .collect();

    let mut issues = Vec::new();
    let mut parsed = Vec::new();
    for id in ids {
        let path = ann_dir.join(format!("{id}.xml"));
        let ann = read(&path).and_then(|t| {
            quick_xml::de::from_str::<XmlAnnotation>(&t).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        });
        match ann {
            Ok(a) => parsed.push((id, a)),
            Err(e) => issues.push(LoadIssue {
                id,
                message: e.to_string(),
            }),
        }
    }
    let class_list = root.join(CLASS_LIST);
    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None if class_list.is_file() => read(&class_list)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => parsed
            .iter()
            .flat_map(|(_, a)| a.objects.iter().map(|o| o.name.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };

    let img_dir = root.join(IMAGES);
    let mut entries = Vec::new();
    'entries: for (id, ann) in parsed {
        let Some(image_path) = find_image(&img_dir, &id, ann.filename.as_deref()) else {
            issues.push(LoadIssue {
                message: format!("no image file for `{id}` in {}", img_dir.display()),
                id,
            });
            continue;
        };
        let mut objects = Vec::with_capacity(ann.objects.len());
        for o in &ann.objects {
            let Some(label) = classes.iter().position(|c| *c == o.name) else {
                issues.push(LoadIssue {
                    message: format!("unknown class `{}`", o.name),
                    id,
                });
                continue 'entries;
            };
            match o.bndbox.to_corners() {
                Ok(bbox) => objects.push(GroundTruthObject { bbox, label }),
                Err(e) => {
                    issues.push(LoadIssue {
                        message: format!("object `{}`: {e}", o.name),
                        id,
                    });
                    continue 'entries;
                }
            }
        }
        entries.push(ManifestEntry {
            id,
            image_path,
            objects,
        });
    }
    Ok(LoadReport {
        manifest: DatasetManifest {
            split: split.to_string(),
            classes,
            entries,
        },
        issues,
    })
}

/// Writes images, annotations and the split list under `root` in the layout
/// [`load_voc_style`] reads, plus `classes.txt`. Images are stored as PNG.
pub fn write_voc_style(root: &Path, split: &str, classes: &[String], samples: &[LabeledImage]) -> Result<DatasetManifest> {
    let ann_dir = root.join(ANNOTATIONS);
    let img_dir = root.join(IMAGES);
    let split_dir = root.join(SPLITS);
    for d in [&ann_dir, &img_dir, &split_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    let mut list = String::new();
    for s in samples {
        let id = s.image.id().to_string();
        let filename = format!("{id}.png");
        let image_path = img_dir.join(&filename);
        save_image(&s.image, &image_path)?;
        let ann = xml_for(&s.image, &filename, classes, &s.objects)?;
        let path = ann_dir.join(format!("{id}.xml"));
        fs::write(&path, ann).map_err(|e| Error::io(&path, e))?;
        list.push_str(&id);
        list.push('\n');
        entries.push(ManifestEntry {
            id,
            image_path,
            objects: s.objects.clone(),
        });
    }
    let path = split_dir.join(format!("{split}.txt"));
    fs::write(&path, list).map_err(|e| Error::io(&path, e))?;
    let path = root.join(CLASS_LIST);
    fs::write(&path, classes.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(DatasetManifest {
        split: split.to_string(),
        classes: classes.to_vec(),
        entries,
    })
}

fn xml_for(image: &Image, filename: &str, classes: &[String], objects: &[GroundTruthObject]) -> Result<String> {
    let objects = objects
        .iter()
        .map(|o| {
            let name = classes
                .get(o.label)
                .ok_or_else(|| Error::Argument(format!("label {} has no class name", o.label)))?;
            Ok(XmlObject {
                name: name.clone(),
                difficult: Some(0),
                bndbox: XmlBox::from_corners(&o.bbox),
            })
        })
        .collect::<Result<_>>()?;
    let ann = XmlAnnotation {
        folder: None,
        filename: Some(filename.to_string()),
        size: Some(XmlSize {
            width: image.width(),
            height: image.height(),
            depth: Image::CHANNELS,
        }),
        objects,
    };
    quick_xml::se::to_string(&ann).map_err(|e| Error::Format(format!("annotation for {filename}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE_A: &str = r#"<annotation>
	<folder>VOC2007</folder>
	<filename>000001.png</filename>
	<size><width>20</width><height>16</height><depth>3</depth></size>
	<object>
		<name>dog</name>
		<pose>Left</pose>
		<truncated>1</truncated>
		<difficult>0</difficult>
		<bndbox><xmin>2</xmin><ymin>3</ymin><xmax>10</xmax><ymax>12</ymax></bndbox>
	</object>
	<object>
		<name>cat</name>
		<difficult>0</difficult>
		<bndbox><xmin>11</xmin><ymin>1</ymin><xmax>20</xmax><ymax>16</ymax></bndbox>
	</object>
</annotation>"#;

    const FIXTURE_B: &str = r#"<annotation>
	<filename>000002.png</filename>
	<object>
		<name>dog</name>
		<bndbox><xmin>1</xmin><ymin>1</ymin><xmax>8</xmax><ymax>8</ymax></bndbox>
	</object>
</annotation>"#;

    fn layout(root: &Path, ids: &[&str]) {
        for d in [ANNOTATIONS, IMAGES, SPLITS] {
            fs::create_dir_all(root.join(d)).unwrap();
        }
        fs::write(root.join(SPLITS).join("test.txt"), ids.join("\n")).unwrap();
    }

    #[test]
    fn reads_hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        layout(root, &["000001", "000002"]);
        fs::write(root.join(ANNOTATIONS).join("000001.xml"), FIXTURE_A).unwrap();
        fs::write(root.join(ANNOTATIONS).join("000002.xml"), FIXTURE_B).unwrap();
        for id in ["000001", "000002"] {
            save_image(&Image::filled(id, 16, 20, 0.5).unwrap(), &root.join(IMAGES).join(format!("{id}.png"))).unwrap();
        }
        let report = load_voc_style(root, "test", None).unwrap();
        assert!(report.issues.is_empty(), "{:?}", report.issues);
        let m = report.manifest;
        assert_eq!(m.classes, vec!["cat".to_string(), "dog".to_string()]);
        assert_eq!(m.entries.len(), 2);
        let a = &m.entries[0].objects;
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].label, 1);
        assert_eq!(a[0].bbox, BoundingBox::new(1.0, 2.0, 10.0, 12.0).unwrap());
        assert_eq!(a[1].label, 0);
        assert_eq!(a[1].bbox, BoundingBox::new(10.0, 0.0, 20.0, 16.0).unwrap());
        assert_eq!(m.entries[1].objects[0].bbox, BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap());
        assert_eq!(m.load_images().unwrap().len(), 2);
    }

    #[test]
    fn missing_image_and_bad_xml_are_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        layout(root, &["000001", "000002", "000003"]);
        fs::write(root.join(ANNOTATIONS).join("000001.xml"), FIXTURE_A).unwrap();
        fs::write(root.join(ANNOTATIONS).join("000002.xml"), FIXTURE_B).unwrap();
        fs::write(root.join(ANNOTATIONS).join("000003.xml"), "<annotation><object>").unwrap();
        save_image(&Image::filled("a", 16, 20, 0.5).unwrap(), &root.join(IMAGES).join("000001.png")).unwrap();
        let report = load_voc_style(root, "test", None).unwrap();
        assert_eq!(report.manifest.entries.len(), 1);
        let ids: Vec<&str> = report.issues.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids.len(), 2);
        assert!(ids.contains(&"000002") && ids.contains(&"000003"));
    }

    #[test]
    fn empty_split_and_missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), &[]);
        let report = load_voc_style(dir.path(), "test", None).unwrap();
        assert!(report.manifest.is_empty() && report.issues.is_empty());
        let other = tempfile::tempdir().unwrap();
        assert!(matches!(load_voc_style(other.path(), "test", None), Err(Error::Io { .. })));
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let classes = vec!["square".to_string(), "disk".to_string()];
        let samples = vec![LabeledImage {
            image: Image::filled("img0", 24, 24, 0.25).unwrap(),
            objects: vec![
                GroundTruthObject {
                    bbox: BoundingBox::new(2.0, 3.0, 12.0, 13.0).unwrap(),
                    label: 1,
                },
                GroundTruthObject {
                    bbox: BoundingBox::new(14.0, 14.0, 24.0, 22.0).unwrap(),
                    label: 0,
                },
            ],
        }];
        write_voc_style(dir.path(), "train", &classes, &samples).unwrap();
        let report = load_voc_style(dir.path(), "train", Some(&classes)).unwrap();
        assert!(report.issues.is_empty());
        let loaded = report.manifest.load_images().unwrap();
        assert_eq!(loaded[0].objects, samples[0].objects);
        assert_eq!(loaded[0].image.id(), "img0");
    }
}
